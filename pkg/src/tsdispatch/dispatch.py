"""Stochastic primal-dual dispatch: average (ADA) and probabilistic (PDA) schemes.

Each iteration draws one realization, solves the slot program(s) for the
current slow decision and multipliers, then takes a projected subgradient step
on the slow decision and a projected supergradient step on the multipliers.
The reported solution is the 1/sqrt(i)-weighted average over the last half of
the iterates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .feeder import FeederModel, SensitivityBundle
from .saa import default_p0a_box, solve_saa
from .scenario import Scenario, ScenarioSpec, expected_scenario, rng_stream, sample_batch
from .subproblem import (
    FastDecision,
    SlowDecision,
    SolveResult,
    SolverSettings,
    Status,
    build_fast_average,
    build_fast_loose,
    build_fast_tight,
    slow_cost_gradient,
    solve,
)

log = logging.getLogger(__name__)

__all__ = [
    "DispatchError",
    "StepSchedule",
    "StopCriteria",
    "SlowBox",
    "RunTrace",
    "RunResult",
    "SlotRecord",
    "slow_box",
    "project_Z",
    "sliding_average",
    "SlidingAverager",
    "initial_decision",
    "dual_update_avg",
    "dual_update_prob",
    "ada_step",
    "ada_run",
    "pda_select",
    "pda_step",
    "pda_run",
    "fast_policy_avg",
    "fast_policy_prob",
    "fast_policy_tight",
    "baseline_run",
    "expected_value_decision",
    "policy_for",
    "iid_sampler",
    "empirical_sampler",
    "in_region",
    "VOLTAGE_TOL",
    "ALGORITHMS",
]

ALGORITHMS = ("ada", "pda", "approx_avg", "approx_prob", "deterministic")

# membership tolerance for the tight region, in squared pu; absorbs solver round-off
# for voltages the tight program pins exactly at a bound
VOLTAGE_TOL = 1e-7


class DispatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepSchedule:
    eps0_v0: float = 4e-5
    eps0_p0: float = 4e-1
    eps0_pd: float = 6e-3
    mu0: float = 225.0

    def __post_init__(self):
        if min(self.eps0_v0, self.eps0_p0, self.eps0_pd, self.mu0) < 0:
            raise ValueError("step sizes must be nonnegative")

    def eps(self, k: int, n_diesel: int) -> np.ndarray:
        base = np.concatenate([[self.eps0_v0, self.eps0_p0], np.full(n_diesel, self.eps0_pd)])
        return base / math.sqrt(k)

    def mu(self, k: int) -> float:
        return self.mu0 / math.sqrt(k)


PDA_STEPS = StepSchedule(mu0=1.0)


@dataclass(frozen=True)
class StopCriteria:
    max_iters: int = 20_000
    window: int = 500
    rel_tol: float = 1e-4
    min_iters: int = 1_000


@dataclass(frozen=True)
class SlowBox:
    lower: np.ndarray
    upper: np.ndarray


def slow_box(model: FeederModel, p0a_box: tuple[float, float]) -> SlowBox:
    reg = model.regions
    lo = [reg.sub_min, p0a_box[0]] + [d.p_min for d in model.diesel_units]
    hi = [reg.sub_max, p0a_box[1]] + [d.p_max for d in model.diesel_units]
    return SlowBox(np.array(lo, dtype=float), np.array(hi, dtype=float))


def project_Z(z_raw, box: SlowBox) -> SlowDecision:
    z = np.asarray(z_raw.as_vector() if isinstance(z_raw, SlowDecision) else z_raw, dtype=float)
    clipped = np.clip(z, box.lower, box.upper)
    if clipped[1] != z[1]:
        log.debug("p0a clamped from %.4f to %.4f", z[1], clipped[1])
    return SlowDecision.from_vector(clipped)


def sliding_average(history, k: int) -> np.ndarray:
    """Weighted tail average of iterates ``history[i - 1] = x_i`` for ``i`` in ceil(k/2)..k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    lo = math.ceil(k / 2)
    idx = np.arange(lo, k + 1)
    w = 1.0 / np.sqrt(idx)
    xs = np.asarray([history[i - 1] for i in idx], dtype=float)
    return np.tensordot(w, xs, axes=1) / w.sum()


class SlidingAverager:
    """O(1)-per-step sliding averages via prefix sums of ``x_i / sqrt(i)``."""

    def __init__(self, dim: int):
        self._wx = [np.zeros(dim)]
        self._w = [0.0]

    def push(self, x) -> np.ndarray:
        i = len(self._w)
        wi = 1.0 / math.sqrt(i)
        self._wx.append(self._wx[-1] + wi * np.asarray(x, dtype=float))
        self._w.append(self._w[-1] + wi)
        lo = math.ceil(i / 2)
        return (self._wx[i] - self._wx[lo - 1]) / (self._w[i] - self._w[lo - 1])


@dataclass
class SlotRecord:
    status: str
    slot_cost: float
    objective: float
    violation: int  # 1 if the applied voltages leave the tight region
    indicator: int = 0  # probabilistic scheme: loose solution kept outside the tight region
    soft: bool = False


@dataclass
class RunTrace:
    """Per-iteration history. Row ``k - 1`` holds the iterate used at iteration ``k``."""

    algorithm: str
    z: list = field(default_factory=list)
    nu: list = field(default_factory=list)
    z_avg: list = field(default_factory=list)
    nu_avg: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.records)

    def counters(self) -> dict:
        st = [r.status for r in self.records]
        return {
            "iterations": len(st),
            "skipped": sum(s == Status.NUMERICAL_FAILURE.value for s in st),
            "soft_recourse": sum(r.soft for r in self.records),
            "tight_violations": sum(r.violation for r in self.records),
        }

    def write_csv(self, path: str | Path, n_diesel: int) -> None:
        nz = 2 + n_diesel
        nnu = len(self.nu[0]) if self.nu else 0
        zn = ["v0a", "p0a"] + [f"p_d{j}" for j in range(n_diesel)]
        nun = [f"nu{j}" for j in range(nnu)]
        header = (
            ["k"] + zn + nun + [f"avg_{s}" for s in zn + nun]
            + ["slot_cost", "objective", "status", "violation", "indicator", "soft"]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, rec in enumerate(self.records, start=1):
                row = [k]
                row += [repr(float(v)) for v in self.z[k - 1]]
                row += [repr(float(v)) for v in self.nu[k - 1]]
                row += [repr(float(v)) for v in self.z_avg[k - 1]]
                row += [repr(float(v)) for v in self.nu_avg[k - 1]]
                row += [repr(rec.slot_cost), repr(rec.objective), rec.status, rec.violation, rec.indicator, int(rec.soft)]
                w.writerow(row)
        assert len(header) == 1 + 2 * (nz + nnu) + 6


@dataclass
class RunResult:
    algorithm: str
    z: SlowDecision
    nu: np.ndarray
    trace: RunTrace
    converged: bool
    alpha: float | None = None

    @property
    def nu_lower(self) -> np.ndarray:
        return self.nu[: len(self.nu) // 2]

    @property
    def nu_upper(self) -> np.ndarray:
        return self.nu[len(self.nu) // 2 :]


# ---------------------------------------------------------------------------
# sampling


Sampler = Callable[[], Scenario]


def iid_sampler(spec: ScenarioSpec, stream: int = 0, batch: int = 1024) -> Sampler:
    """Endless i.i.d. realizations from one Philox stream."""
    rng = rng_stream(spec.seed, stream)
    buf: list[Scenario] = []

    def draw() -> Scenario:
        if not buf:
            buf.extend(reversed(sample_batch(spec, batch, rng)))
        return buf.pop()

    return draw


def empirical_sampler(scenarios: list[Scenario], seed: int = 0) -> Sampler:
    """Uniform draws (with replacement) from a fixed scenario list."""
    rng = rng_stream(seed, 7)
    return lambda: scenarios[int(rng.integers(len(scenarios)))]


# ---------------------------------------------------------------------------
# helpers


def in_region(v, lo: float, hi: float, tol: float = VOLTAGE_TOL) -> bool:
    v = np.asarray(v)
    return bool(np.all(v >= lo - tol) and np.all(v <= hi + tol))


def initial_decision(model: FeederModel, spec: ScenarioSpec, box: SlowBox) -> SlowDecision:
    mid = 0.5 * (box.lower + box.upper)
    exp = expected_scenario(spec)
    mid[1] = float(np.sum(exp.p_load) - np.sum(exp.solar_avail))
    return project_Z(mid, box)


def _solve_with_recourse_fallback(build, build_soft, settings) -> tuple[SolveResult, bool]:
    res = solve(build(), settings)
    if res.status is Status.INFEASIBLE:
        res = solve(build_soft(), settings)
        return res, True
    return res, False


def _z_step(model, z: SlowDecision, res: SolveResult, eps: np.ndarray, box: SlowBox) -> SlowDecision:
    grad = slow_cost_gradient(model, z) + res.duals.recourse_gradient(model)
    return project_Z(z.as_vector() - eps * grad, box)


def _check_skips(trace: RunTrace) -> None:
    skipped = sum(r.status == Status.NUMERICAL_FAILURE.value for r in trace.records)
    if skipped >= 5 and skipped > 0.01 * trace.n_iter:
        raise DispatchError(f"{skipped} of {trace.n_iter} slot solves failed numerically")


def _has_converged(z_avg: list, nu_avg: list, stop: StopCriteria) -> bool:
    k = len(z_avg)
    if k < max(stop.min_iters, 2 * stop.window):
        return False
    cur = np.concatenate([z_avg[-1], nu_avg[-1]])
    old = np.concatenate([z_avg[-1 - stop.window], nu_avg[-1 - stop.window]])
    scale = np.maximum(np.abs(cur), 1.0)
    return bool(np.max(np.abs(cur - old) / scale) < stop.rel_tol)


# ---------------------------------------------------------------------------
# average dispatch


def dual_update_avg(nu, mu: float, v, v_lo: float, v_hi: float) -> np.ndarray:
    """Projected supergradient step on the stacked multipliers ``(nu_lower, nu_upper)``."""
    v = np.asarray(v, dtype=float)
    h = np.concatenate([v_lo - v, v - v_hi])
    return np.maximum(np.asarray(nu, dtype=float) + mu * h, 0.0)


def dual_update_prob(nu, mu: float, indicator: int, alpha: float) -> np.ndarray:
    return np.maximum(np.asarray(nu, dtype=float) + mu * (indicator - alpha), 0.0)


def ada_step(model, S, z: SlowDecision, nu: np.ndarray, xi: Scenario, steps: StepSchedule, k: int,
             box: SlowBox, settings: SolverSettings | None = None):
    """One stochastic primal-dual iteration of the average scheme.

    Returns ``(z_next, nu_next, record)``; on a numerical solver failure the
    state is returned unchanged.
    """
    N = model.N
    reg = model.regions
    res, soft = _solve_with_recourse_fallback(
        lambda: build_fast_average(model, S, z, nu[:N], nu[N:], xi),
        lambda: build_fast_average(model, S, z, nu[:N], nu[N:], xi, soft=True),
        settings,
    )
    if not res.ok:
        return z, nu, SlotRecord(res.status.value, math.nan, math.nan, 0, 0, soft)
    v = res.y.v
    nu_next = dual_update_avg(nu, steps.mu(k), v, reg.a_min, reg.a_max)
    z_next = _z_step(model, z, res, steps.eps(k, len(model.diesel_units)), box)
    viol = int(not in_region(v, reg.a_min, reg.a_max))
    return z_next, nu_next, SlotRecord(res.status.value, res.slot_cost, res.objective, viol, 0, soft)


def _run(algorithm, step_fn, model, z0, nu0, sampler, stop: StopCriteria, freeze_z=False) -> RunResult:
    trace = RunTrace(algorithm)
    z, nu = z0, np.asarray(nu0, dtype=float)
    z_avg = SlidingAverager(z.as_vector().size)
    nu_avg = SlidingAverager(nu.size)
    converged = False
    for k in range(1, stop.max_iters + 1):
        xi = sampler()
        trace.z.append(z.as_vector())
        trace.nu.append(nu.copy())
        trace.z_avg.append(z_avg.push(z.as_vector()))
        trace.nu_avg.append(nu_avg.push(nu))
        z_next, nu_next, rec = step_fn(z, nu, xi, k)
        trace.records.append(rec)
        _check_skips(trace)
        if not freeze_z:
            z = z_next
        nu = nu_next
        if _has_converged(trace.z_avg, trace.nu_avg, stop):
            converged = True
            break
    if trace.n_iter == 0:
        return RunResult(algorithm, z0, np.asarray(nu0, dtype=float), trace, False)
    z_out = SlowDecision.from_vector(trace.z_avg[-1])
    if freeze_z:
        z_out = z0
    if not converged:
        log.warning("%s: no convergence after %d iterations", algorithm, trace.n_iter)
    return RunResult(algorithm, z_out, trace.nu_avg[-1].copy(), trace, converged)


def ada_run(model, S, spec: ScenarioSpec, steps: StepSchedule = StepSchedule(), stop: StopCriteria = StopCriteria(),
            p0a_box=None, sampler: Sampler | None = None, settings: SolverSettings | None = None,
            z0: SlowDecision | None = None) -> RunResult:
    """Average dispatch: stochastic saddle-point iteration until the sliding averages settle."""
    box = slow_box(model, p0a_box or default_p0a_box(spec.p_mean))
    z0 = z0 or initial_decision(model, spec, box)
    sampler = sampler or iid_sampler(spec)

    def step(z, nu, xi, k):
        return ada_step(model, S, z, nu, xi, steps, k, box, settings)

    return _run("ada", step, model, z0, np.zeros(2 * model.N), sampler, stop)


# ---------------------------------------------------------------------------
# probabilistic dispatch


def pda_select(result_loose: SolveResult, result_tight: SolveResult | None, nu: float,
               v_lo: float, v_hi: float) -> tuple[SolveResult, int]:
    """Pick the minimizer of slot cost plus ``nu`` times the out-of-region indicator.

    ``result_tight`` may be ``None`` when the loose voltages already lie in the
    tight region, or infeasible (treated as infinite cost). Returns the chosen
    result and the indicator (1 iff the loose solution outside the region is kept).
    """
    if in_region(result_loose.y.v, v_lo, v_hi):
        return result_loose, 0
    g_b = result_loose.slot_cost
    g_a = result_tight.slot_cost if (result_tight is not None and result_tight.ok) else math.inf
    if g_a <= g_b + nu:
        return result_tight, 0
    return result_loose, 1


def _prob_policy(model, S, z, nu: float, xi, settings) -> tuple[SolveResult, int, bool]:
    reg = model.regions
    loose, soft = _solve_with_recourse_fallback(
        lambda: build_fast_loose(model, S, z, xi),
        lambda: build_fast_loose(model, S, z, xi, soft=True),
        settings,
    )
    if not loose.ok:
        return loose, 0, soft
    if in_region(loose.y.v, reg.a_min, reg.a_max):
        return loose, 0, soft
    tight = solve(build_fast_tight(model, S, z, xi), settings)
    if tight.status is Status.NUMERICAL_FAILURE:
        return tight, 0, soft
    chosen, ind = pda_select(loose, tight, nu, reg.a_min, reg.a_max)
    return chosen, ind, soft


def pda_step(model, S, z: SlowDecision, nu: np.ndarray, xi: Scenario, steps: StepSchedule, k: int,
             alpha: float, box: SlowBox, settings: SolverSettings | None = None):
    """One stochastic primal-dual iteration of the probabilistic scheme (``nu`` has one entry)."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    res, ind, soft = _prob_policy(model, S, z, float(nu[0]), xi, settings)
    if not res.ok:
        return z, nu, SlotRecord(res.status.value, math.nan, math.nan, 0, 0, soft)
    nu_next = dual_update_prob(nu, steps.mu(k), ind, alpha)
    z_next = _z_step(model, z, res, steps.eps(k, len(model.diesel_units)), box)
    reg = model.regions
    viol = int(not in_region(res.y.v, reg.a_min, reg.a_max))
    return z_next, nu_next, SlotRecord(res.status.value, res.slot_cost, res.slot_cost, viol, ind, soft)


def pda_run(model, S, spec: ScenarioSpec, steps: StepSchedule = PDA_STEPS, stop: StopCriteria = StopCriteria(),
            alpha: float = 0.05, p0a_box=None, sampler: Sampler | None = None,
            settings: SolverSettings | None = None, z0: SlowDecision | None = None) -> RunResult:
    """Probabilistic dispatch. Convergence is empirical only."""
    box = slow_box(model, p0a_box or default_p0a_box(spec.p_mean))
    z0 = z0 or initial_decision(model, spec, box)
    sampler = sampler or iid_sampler(spec)

    def step(z, nu, xi, k):
        return pda_step(model, S, z, nu, xi, steps, k, alpha, box, settings)

    out = _run("pda", step, model, z0, np.zeros(1), sampler, stop)
    out.alpha = alpha
    return out


# ---------------------------------------------------------------------------
# real-time policies


def fast_policy_avg(model, S, z: SlowDecision, nu, xi: Scenario,
                    settings: SolverSettings | None = None) -> SolveResult:
    nu = np.asarray(nu, dtype=float)
    N = model.N
    res, soft = _solve_with_recourse_fallback(
        lambda: build_fast_average(model, S, z, nu[:N], nu[N:], xi),
        lambda: build_fast_average(model, S, z, nu[:N], nu[N:], xi, soft=True),
        settings,
    )
    return res if not soft else _mark_soft(res)


def fast_policy_prob(model, S, z: SlowDecision, nu, xi: Scenario,
                     settings: SolverSettings | None = None) -> SolveResult:
    res, _, soft = _prob_policy(model, S, z, float(np.atleast_1d(nu)[0]), xi, settings)
    return res if not soft else _mark_soft(res)


def fast_policy_tight(model, S, z: SlowDecision, nu, xi: Scenario,
                      settings: SolverSettings | None = None) -> SolveResult:
    """Deterministic scheme: tight region enforced every slot.

    When no recourse reaches the tight region, excursions from it are priced
    at a prohibitive linear penalty, so they stay as small as physically possible.
    """
    res = solve(build_fast_tight(model, S, z, xi), settings)
    if res.status is not Status.INFEASIBLE:
        return res
    res = solve(build_fast_tight(model, S, z, xi, soft=True), settings)
    if res.status is Status.INFEASIBLE:
        res = solve(build_fast_loose(model, S, z, xi, soft=True), settings)
        return _mark_soft(_mark(res, "tight_infeasible"))
    return _mark(res, "tight_infeasible")


def _mark(res: SolveResult, flag: str) -> SolveResult:
    if res.extra is not None:
        res.extra[flag] = True
    return res


def _mark_soft(res: SolveResult) -> SolveResult:
    return _mark(res, "soft")


# ---------------------------------------------------------------------------
# baselines


def expected_value_decision(model, S, spec: ScenarioSpec, p0a_box=None) -> SlowDecision:
    """Slow decision of the single-scenario dispatch at expected loads and solar."""
    box = p0a_box or default_p0a_box(spec.p_mean)
    return solve_saa(model, S, [expected_scenario(spec)], box).z


def baseline_run(model, S, spec: ScenarioSpec, kind: str, steps: StepSchedule | None = None,
                 stop: StopCriteria = StopCriteria(), alpha: float = 0.05, p0a_box=None,
                 sampler: Sampler | None = None, settings: SolverSettings | None = None) -> RunResult:
    """Expected-value baselines: slow decision frozen at the expected-scenario optimum.

    ``approx_avg`` and ``approx_prob`` then run the dual-only stochastic
    iteration for their multipliers; ``deterministic`` has no multipliers.
    """
    z = expected_value_decision(model, S, spec, p0a_box)
    box = slow_box(model, p0a_box or default_p0a_box(spec.p_mean))
    sampler = sampler or iid_sampler(spec)
    if kind == "approx_avg":
        steps = steps or StepSchedule()

        def step(zz, nu, xi, k):
            return ada_step(model, S, zz, nu, xi, steps, k, box, settings)

        return _run(kind, step, model, z, np.zeros(2 * model.N), sampler, stop, freeze_z=True)
    if kind == "approx_prob":
        steps = steps or PDA_STEPS

        def step(zz, nu, xi, k):
            return pda_step(model, S, zz, nu, xi, steps, k, alpha, box, settings)

        out = _run(kind, step, model, z, np.zeros(1), sampler, stop, freeze_z=True)
        out.alpha = alpha
        return out
    if kind == "deterministic":
        return RunResult(kind, z, np.zeros(0), RunTrace(kind), True)
    raise ValueError(f"unknown baseline kind {kind!r}")


def policy_for(algorithm: str):
    """Real-time policy used by each scheme once its slow decision is fixed."""
    return {
        "ada": fast_policy_avg,
        "approx_avg": fast_policy_avg,
        "pda": fast_policy_prob,
        "approx_prob": fast_policy_prob,
        "deterministic": fast_policy_tight,
    }[algorithm]
