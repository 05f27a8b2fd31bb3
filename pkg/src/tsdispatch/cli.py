"""Command-line harness: ``run``, ``evaluate``, ``oracle`` and ``scenario-dump``.

Configuration is one JSON file (see ``docs/config.md``); any field can be
overridden on the command line with ``--set section.key=value``.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dispatch import (
    ALGORITHMS,
    PDA_STEPS,
    DispatchError,
    RunResult,
    StepSchedule,
    StopCriteria,
    ada_run,
    baseline_run,
    empirical_sampler,
    pda_run,
    policy_for,
)
from .evaluate import EvalError, monte_carlo_eval, saa_oracle, write_report
from .feeder import FeederError, FeederModel, build_sensitivity, bundled_feeder_path, load_feeder
from .saa import SAAInfeasible
from .scenario import ScenarioSpec, dump_scenarios, rng_stream, sample_batch, spec_for
from .subproblem import SlowDecision, SolverSettings, slow_cost

log = logging.getLogger("tsdispatch")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS = 0, 1, 2
_ORACLE_STREAM = 3

DEFAULTS = {
    "feeder_path": None,
    "algorithm": "ada",
    "alpha": None,
    "seed": 0,
    "output_dir": "out",
    "pi": None,
    "voltage_tight": None,
    "p0a_box": None,
    "empirical_k": None,
    "n_samples": 6000,
    "scenario": {
        "load_scale": 1.0,
        "load_std_factor": 0.2,
        "solar_low_factor": 0.5,
        "solar_high_factor": 1.0,
    },
    "steps": {"eps0_v0": 4e-5, "eps0_p0": 0.4, "eps0_pd": 6e-3, "mu0": None},
    "stop": {"max_iters": 20000, "window": 500, "rel_tol": 1e-4, "min_iters": 1000},
    "solver": {"tol_feas": 1e-8, "tol_gap_rel": 1e-8, "tol_gap_abs": 1e-8, "max_iter": 200},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config field {name!r} must be an object")
            out[key] = _merge(base[key], val, name + ".")
        else:
            out[key] = val
    return out


def _apply_override(cfg: dict, item: str) -> None:
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config field {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config field {key!r}")
    node[parts[-1]] = val


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the JSON file, then ``key=value`` overrides; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, doc)
    for item in overrides or []:
        _apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    alg = cfg["algorithm"]
    if alg not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}; got {alg!r}")
    if alg in ("pda", "approx_prob"):
        a = cfg["alpha"]
        if a is None:
            raise ConfigError(f"alpha required for algorithm {alg}")
        if not isinstance(a, (int, float)) or not 0 < a < 1:
            raise ConfigError(f"alpha must lie in (0, 1); got {a!r}")
    if cfg["feeder_path"] is not None and not Path(cfg["feeder_path"]).exists():
        raise ConfigError(f"feeder_path {cfg['feeder_path']} does not exist")
    stop = cfg["stop"]
    if not isinstance(stop["max_iters"], int) or stop["max_iters"] < 0:
        raise ConfigError("stop.max_iters must be a nonnegative integer")
    if cfg["empirical_k"] is not None and (not isinstance(cfg["empirical_k"], int) or cfg["empirical_k"] < 1):
        raise ConfigError("empirical_k must be a positive integer")
    box = cfg["p0a_box"]
    if box is not None and (len(box) != 2 or box[0] > box[1]):
        raise ConfigError("p0a_box must be [lo, hi] with lo <= hi")
    vt = cfg["voltage_tight"]
    if vt is not None and (len(vt) != 2 or vt[0] > vt[1]):
        raise ConfigError("voltage_tight must be [lo, hi] with lo <= hi")


# ---------------------------------------------------------------------------
# config -> objects


def build_model(cfg: dict) -> FeederModel:
    model = load_feeder(cfg["feeder_path"] or bundled_feeder_path())
    if cfg["pi"] is not None:
        pi = np.broadcast_to(np.asarray(cfg["pi"], dtype=float), (len(model.pv_units),))
        model = model.replace(prices=dataclasses.replace(model.prices, pv_compensation=tuple(float(v) for v in pi)))
    if cfg["voltage_tight"] is not None:
        lo, hi = cfg["voltage_tight"]
        try:
            model = model.replace(regions=model.regions.with_tight(float(lo), float(hi)))
        except FeederError as e:
            raise ConfigError(f"voltage_tight: {e}") from None
    return model


def build_spec(cfg: dict, model: FeederModel) -> ScenarioSpec:
    sc = dict(cfg["scenario"])
    scale = sc.pop("load_scale")
    try:
        return spec_for(model, load_scale=scale, seed=int(cfg["seed"]), **sc)
    except ValueError as e:
        raise ConfigError(f"scenario: {e}") from None


def _steps(cfg: dict) -> StepSchedule:
    st = dict(cfg["steps"])
    if st["mu0"] is None:
        st["mu0"] = PDA_STEPS.mu0 if cfg["algorithm"] in ("pda", "approx_prob") else StepSchedule().mu0
    return StepSchedule(**st)


def _oracle_scenarios(cfg: dict, spec: ScenarioSpec, k: int):
    return sample_batch(spec, k, rng_stream(spec.seed, _ORACLE_STREAM))


def execute(cfg: dict) -> tuple[FeederModel, RunResult]:
    model = build_model(cfg)
    S = build_sensitivity(model)
    spec = build_spec(cfg, model)
    stop = StopCriteria(**cfg["stop"])
    settings = SolverSettings(**cfg["solver"])
    box = tuple(cfg["p0a_box"]) if cfg["p0a_box"] else None
    sampler = None
    if cfg["empirical_k"]:
        sampler = empirical_sampler(_oracle_scenarios(cfg, spec, cfg["empirical_k"]), spec.seed)
    alg = cfg["algorithm"]
    kw = dict(steps=_steps(cfg), stop=stop, p0a_box=box, sampler=sampler, settings=settings)
    if alg == "ada":
        return model, ada_run(model, S, spec, **kw)
    if alg == "pda":
        return model, pda_run(model, S, spec, alpha=cfg["alpha"], **kw)
    return model, baseline_run(model, S, spec, alg, alpha=cfg["alpha"] or 0.05, **kw)


def _cost_estimate(model: FeederModel, result: RunResult) -> float | None:
    """f(z*) plus the mean slot cost over the second half of the run."""
    recs = result.trace.records
    tail = [r.slot_cost for r in recs[len(recs) // 2:] if math.isfinite(r.slot_cost)]
    if not tail:
        return None
    return slow_cost(model, result.z) + math.fsum(tail) / len(tail)


def summary_dict(cfg: dict, model: FeederModel, result: RunResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "algorithm": result.algorithm,
        "feeder": model.name,
        "converged": bool(result.converged),
        "max_iters_warning": not result.converged,
        "z": {
            "v0a": result.z.v0a,
            "p0a": result.z.p0a,
            "p_d": [float(v) for v in result.z.p_d],
        },
        "nu": [float(v) for v in result.nu],
        "alpha": result.alpha,
        "cost_estimate": _cost_estimate(model, result),
        "counters": result.trace.counters(),
        "config": cfg,
    }


def read_summary(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"summary {path} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"summary {path} is corrupt: {e}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise ConfigError(f"summary {path} has no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"summary schema_version {doc['schema_version']} does not match {SCHEMA_VERSION}")
    for key in ("algorithm", "z", "nu", "config"):
        if key not in doc:
            raise ConfigError(f"summary {path} lacks field {key!r}")
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_run(cfg: dict) -> int:
    model, result = execute(cfg)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    result.trace.write_csv(out / "trace.csv", len(model.diesel_units))
    with open(out / "summary.json", "w") as fh:
        json.dump(summary_dict(cfg, model, result), fh, indent=2)
    if not result.converged:
        log.warning("%s stopped at max_iters=%d without converging", result.algorithm, cfg["stop"]["max_iters"])
        return EXIT_MAX_ITERS
    return EXIT_OK


def cmd_evaluate(summary_path: str, n_samples: int | None, output_dir: str | None, seed: int | None) -> int:
    doc = read_summary(summary_path)
    cfg = doc["config"]
    validate_config(cfg)
    n = cfg["n_samples"] if n_samples is None else n_samples
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"n_samples must be a positive integer; got {n!r}")
    model = build_model(cfg)
    S = build_sensitivity(model)
    spec = build_spec(cfg, model)
    z = SlowDecision(float(doc["z"]["v0a"]), float(doc["z"]["p0a"]), np.asarray(doc["z"]["p_d"], dtype=float))
    report = monte_carlo_eval(
        model, S, policy_for(doc["algorithm"]), z, np.asarray(doc["nu"], dtype=float), spec,
        n_samples=n, seed=cfg["seed"] if seed is None else seed, settings=SolverSettings(**cfg["solver"]),
    )
    write_report(report, output_dir or cfg["output_dir"])
    return EXIT_OK


def cmd_oracle(cfg: dict, k: int) -> int:
    if k < 1:
        raise ConfigError(f"K must be a positive integer; got {k}")
    model = build_model(cfg)
    S = build_sensitivity(model)
    spec = build_spec(cfg, model)
    box = tuple(cfg["p0a_box"]) if cfg["p0a_box"] else None
    res = saa_oracle(model, S, _oracle_scenarios(cfg, spec, k), p0a_box=box)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "K": k,
        "cost": res.cost,
        "slow_cost": res.slow_cost,
        "mean_slot_cost": res.mean_slot_cost,
        "z": {"v0a": res.z.v0a, "p0a": res.z.p0a, "p_d": [float(v) for v in res.z.p_d]},
        "mean_voltage": res.mean_voltage.tolist(),
        "status": res.status,
    }
    with open(out / "oracle.json", "w") as fh:
        json.dump(doc, fh, indent=2)
    return EXIT_OK


def cmd_scenario_dump(cfg: dict, n: int, path: str | None) -> int:
    if n < 1:
        raise ConfigError(f"n must be a positive integer; got {n}")
    model = build_model(cfg)
    spec = build_spec(cfg, model)
    target = Path(path) if path else Path(cfg["output_dir"]) / "scenarios.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    dump_scenarios(_oracle_scenarios(cfg, spec, n), target)
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsdispatch", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. stop.max_iters=500")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("run", help="train one scheme and write trace.csv and summary.json")
    common(p)
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-iters", type=int)

    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation of a trained summary")
    p.add_argument("summary")
    p.add_argument("--n-samples", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("oracle", help="scenario-average deterministic equivalent over K samples")
    common(p)
    p.add_argument("-K", "--k", dest="k", type=int, default=50)

    p = sub.add_parser("scenario-dump", help="write sampled scenarios as CSV")
    common(p)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--out")
    return ap


def _config_from_args(args) -> dict:
    overrides = list(args.overrides)
    for flag, key in (("output_dir", "output_dir"), ("seed", "seed"), ("algorithm", "algorithm"),
                      ("alpha", "alpha"), ("max_iters", "stop.max_iters")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.summary, args.n_samples, args.output_dir, args.seed)
        cfg = _config_from_args(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg, args.k)
        return cmd_scenario_dump(cfg, args.n, args.out)
    except (ConfigError, FeederError, DispatchError, EvalError, SAAInfeasible, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
