"""Monte-Carlo evaluation of converged policies and the scenario-average oracle."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .feeder import FeederModel, SensitivityBundle
from .saa import SAAResult, default_p0a_box, solve_saa
from .scenario import Scenario, ScenarioSpec, rng_stream, sample_batch
from .subproblem import SlowDecision, SolverSettings, slow_cost

__all__ = [
    "EvalReport",
    "EvalError",
    "monte_carlo_eval",
    "saa_oracle",
    "paired_difference",
    "histogram_edges",
    "write_report",
    "THREADS_ENV",
    "default_workers",
]

THREADS_ENV = "TSDISPATCH_THREADS"
HIST_BINS = 60
HIST_MARGIN = 0.01  # pu of voltage magnitude on each side of the loose box
CHUNK = 250
FAIL_FRACTION = 0.01
_EVAL_STREAM = 10_000


class EvalError(RuntimeError):
    pass


def default_workers() -> int:
    """Worker processes for evaluation, capped by the ``TSDISPATCH_THREADS`` variable."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise EvalError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


@dataclass
class EvalReport:
    n_samples: int
    expected_cost: float
    cost_stderr: float
    slow_cost: float
    mean_slot_cost: float
    mean_voltage: np.ndarray
    violation_prob_overall: float
    violation_prob_per_bus: np.ndarray
    hist_edges: np.ndarray
    voltage_histograms: dict[int, np.ndarray]
    event_counters: dict[str, int]
    max_loose_residual: float
    max_inverter_residual: float
    # per-sample slot costs, kept in memory for paired comparisons only
    slot_costs: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "expected_cost": self.expected_cost,
            "cost_stderr": self.cost_stderr,
            "slow_cost": self.slow_cost,
            "mean_slot_cost": self.mean_slot_cost,
            "mean_voltage": self.mean_voltage.tolist(),
            "violation_prob_overall": self.violation_prob_overall,
            "violation_prob_per_bus": self.violation_prob_per_bus.tolist(),
            "hist_edges": self.hist_edges.tolist(),
            "voltage_histograms": {str(b): h.tolist() for b, h in self.voltage_histograms.items()},
            "event_counters": dict(self.event_counters),
            "max_loose_residual": self.max_loose_residual,
            "max_inverter_residual": self.max_inverter_residual,
        }


def histogram_edges(model: FeederModel) -> np.ndarray:
    reg = model.regions
    lo = math.sqrt(reg.b_min) - HIST_MARGIN
    hi = math.sqrt(reg.b_max) + HIST_MARGIN
    return np.linspace(lo, hi, HIST_BINS + 1)


@dataclass
class _Chunk:
    slot_costs: np.ndarray
    v_sum: np.ndarray
    viol_any: int
    viol_bus: np.ndarray
    hist: np.ndarray  # (N, bins)
    counters: dict
    loose_res: float
    inv_res: float


def _inverter_residual(model: FeederModel, y, xi: Scenario) -> float:
    if not model.pv_units:
        return 0.0
    phi = np.array([u.phi for u in model.pv_units])
    smax = np.array([u.s_max for u in model.pv_units])
    pr, qr = y.p_r, y.q_r
    res = np.concatenate([
        -pr,
        pr - xi.solar_avail,
        np.abs(qr) - phi * pr,
        np.hypot(pr, qr) - smax,
    ])
    return float(max(0.0, res.max()))


def _eval_chunk(args) -> _Chunk:
    model, S, policy, z, nu, spec, n, seed, chunk_id, settings = args
    reg = model.regions
    N = model.N
    edges = histogram_edges(model)
    scenarios = sample_batch(spec, n, rng_stream(seed, _EVAL_STREAM + chunk_id))
    costs = np.empty(n)
    v_sum = np.zeros(N)
    viol_bus = np.zeros(N, dtype=int)
    viol_any = 0
    hist = np.zeros((N, HIST_BINS), dtype=int)
    counters = {"solved": 0, "failed": 0, "soft_recourse": 0, "tight_infeasible": 0}
    loose_res = inv_res = 0.0
    for i, xi in enumerate(scenarios):
        res = policy(model, S, z, nu, xi, settings)
        if not res.ok:
            counters["failed"] += 1
            costs[i] = np.nan
            continue
        counters["solved"] += 1
        extra = res.extra or {}
        counters["soft_recourse"] += bool(extra.get("soft"))
        counters["tight_infeasible"] += bool(extra.get("tight_infeasible"))
        v = res.y.v
        costs[i] = res.slot_cost
        v_sum += v
        out = (v < reg.a_min - 1e-7) | (v > reg.a_max + 1e-7)
        viol_bus += out
        viol_any += bool(out.any())
        loose_res = max(loose_res, float(np.max(np.maximum(reg.b_min - v, v - reg.b_max))))
        inv_res = max(inv_res, _inverter_residual(model, res.y, xi))
        mag = np.sqrt(np.maximum(v, 0.0))
        idx = np.clip(np.searchsorted(edges, mag, side="right") - 1, 0, HIST_BINS - 1)
        hist[np.arange(N), idx] += 1
    return _Chunk(costs, v_sum, viol_any, viol_bus, hist, counters, max(loose_res, 0.0), inv_res)


def monte_carlo_eval(
    model: FeederModel,
    S: SensitivityBundle,
    policy,
    z: SlowDecision,
    nu,
    spec: ScenarioSpec,
    n_samples: int = 6000,
    seed: int = 0,
    settings: SolverSettings | None = None,
    workers: int | None = None,
) -> EvalReport:
    """Apply ``policy`` to ``n_samples`` fresh scenarios and aggregate cost and voltage statistics.

    Samples are drawn in fixed-size chunks, each from its own stream under
    ``seed``, so the report does not depend on the number of workers.
    """
    if n_samples < 1:
        raise EvalError("n_samples must be at least 1")
    workers = default_workers() if workers is None else workers
    sizes = [CHUNK] * (n_samples // CHUNK)
    if n_samples % CHUNK:
        sizes.append(n_samples % CHUNK)
    jobs = [(model, S, policy, z, nu, spec, n, seed, c, settings) for c, n in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_eval_chunk, jobs))
    else:
        chunks = [_eval_chunk(j) for j in jobs]

    counters = {k: sum(c.counters[k] for c in chunks) for k in chunks[0].counters}
    counters["samples"] = n_samples
    if counters["failed"] > FAIL_FRACTION * n_samples:
        raise EvalError(f"{counters['failed']} of {n_samples} slot solves failed")
    solved = counters["solved"]
    if solved == 0:
        raise EvalError("no slot solve succeeded")

    costs = np.concatenate([c.slot_costs for c in chunks])
    ok = costs[~np.isnan(costs)]
    mean_slot = math.fsum(ok) / solved
    stderr = float(np.std(ok, ddof=1) / math.sqrt(solved)) if solved > 1 else 0.0
    f = slow_cost(model, z)
    v_sum = np.sum([c.v_sum for c in chunks], axis=0)
    hist = np.sum([c.hist for c in chunks], axis=0)
    return EvalReport(
        n_samples=n_samples,
        expected_cost=f + mean_slot,
        cost_stderr=stderr,
        slow_cost=f,
        mean_slot_cost=mean_slot,
        mean_voltage=v_sum / solved,
        violation_prob_overall=sum(c.viol_any for c in chunks) / solved,
        violation_prob_per_bus=np.sum([c.viol_bus for c in chunks], axis=0) / solved,
        hist_edges=histogram_edges(model),
        voltage_histograms={n + 1: hist[n] for n in range(model.N)},
        event_counters=counters,
        max_loose_residual=max(c.loose_res for c in chunks),
        max_inverter_residual=max(c.inv_res for c in chunks),
        slot_costs=costs,
    )


def paired_difference(base: EvalReport, other: EvalReport) -> tuple[float, float]:
    """Mean of ``other - base`` in expected cost and its standard error.

    Both reports must come from the same seed and sample count, so each
    policy saw the same scenarios; pairs where either solve failed are dropped.
    """
    if base.slot_costs is None or other.slot_costs is None or base.slot_costs.shape != other.slot_costs.shape:
        raise EvalError("paired comparison needs per-sample costs from equally sized evaluations")
    d = other.slot_costs - base.slot_costs
    d = d[~np.isnan(d)]
    if d.size < 2:
        raise EvalError("fewer than two paired samples")
    mean = (other.slow_cost - base.slow_cost) + math.fsum(d) / d.size
    return mean, float(np.std(d, ddof=1) / math.sqrt(d.size))


def saa_oracle(
    model: FeederModel,
    S: SensitivityBundle,
    scenarios: list[Scenario],
    mode: str = "average",
    p0a_box: tuple[float, float] | None = None,
) -> SAAResult:
    """Deterministic equivalent of the averaged dispatch over a fixed scenario list."""
    if mode != "average":
        raise ValueError(f"unsupported oracle mode {mode!r}; only 'average' is convex")
    if not scenarios:
        raise ValueError("need at least one scenario")
    box = p0a_box or default_p0a_box(np.mean([s.p_load for s in scenarios], axis=0))
    return solve_saa(model, S, scenarios, box)


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """Write ``eval.json``, ``perbus_violations.csv`` and one ``hist_bus<N>.csv`` per bus."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    with open(out / "perbus_violations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "violation_prob", "mean_voltage"])
        for n, (p, v) in enumerate(zip(report.violation_prob_per_bus, report.mean_voltage), start=1):
            w.writerow([n, repr(float(p)), repr(float(v))])
    edges = report.hist_edges
    for bus, counts in report.voltage_histograms.items():
        with open(out / f"hist_bus{bus}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
