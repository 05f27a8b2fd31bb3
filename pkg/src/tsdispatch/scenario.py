"""Random realizations of available solar power and (re)active loads."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .feeder import FeederModel

log = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "ScenarioSpec",
    "spec_for",
    "rng_stream",
    "sample",
    "sample_batch",
    "expected_scenario",
    "dump_scenarios",
]


@dataclass(frozen=True)
class Scenario:
    solar_avail: np.ndarray  # per PV unit, MW
    p_load: np.ndarray  # per bus 1..N, MW
    q_load: np.ndarray  # per bus 1..N, MVAr


@dataclass(frozen=True)
class ScenarioSpec:
    p_mean: np.ndarray
    q_mean: np.ndarray
    pv_rating: np.ndarray
    load_std_factor: float = 0.2
    solar_low_factor: float = 0.5
    solar_high_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.solar_low_factor <= self.solar_high_factor <= 1:
            raise ValueError("need 0 <= solar_low_factor <= solar_high_factor <= 1")
        if self.load_std_factor < 0:
            raise ValueError("load_std_factor must be nonnegative")

    def replace(self, **changes) -> "ScenarioSpec":
        return replace(self, **changes)


def spec_for(model: FeederModel, load_scale: float = 1.0, **kw) -> ScenarioSpec:
    """Scenario spec using the feeder's nominal loads (optionally scaled) and PV ratings."""
    return ScenarioSpec(
        p_mean=model.p_load * load_scale,
        q_mean=model.q_load * load_scale,
        pv_rating=np.array([u.rating for u in model.pv_units]),
        **kw,
    )


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent Philox stream ``stream`` under root ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


def _gauss_truncated(rng, mean, std_factor, size):
    draw = rng.normal(size=(size, mean.size)) * (std_factor * mean) + mean
    neg = draw < 0
    return np.where(neg, 0.0, draw), int(neg.sum())


def sample_batch(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> list[Scenario]:
    """Draw ``n`` i.i.d. scenarios. The draw order is fixed, so output depends only on ``rng``."""
    p, neg_p = _gauss_truncated(rng, spec.p_mean, spec.load_std_factor, n)
    q, neg_q = _gauss_truncated(rng, spec.q_mean, spec.load_std_factor, n)
    u = rng.uniform(spec.solar_low_factor, spec.solar_high_factor, size=(n, spec.pv_rating.size))
    solar = u * spec.pv_rating
    if neg_p or neg_q:
        log.info("truncated %d negative load draws out of %d", neg_p + neg_q, 2 * p.size)
    return [Scenario(solar[i], p[i], q[i]) for i in range(n)]


def sample(spec: ScenarioSpec, rng: np.random.Generator) -> Scenario:
    return sample_batch(spec, 1, rng)[0]


def expected_scenario(spec: ScenarioSpec) -> Scenario:
    mid = 0.5 * (spec.solar_low_factor + spec.solar_high_factor)
    return Scenario(mid * spec.pv_rating, spec.p_mean.copy(), spec.q_mean.copy())


def dump_scenarios(scenarios: list[Scenario], path: str | Path) -> None:
    """CSV dump, one row per scenario: active loads, reactive loads, then PV availability."""
    if not scenarios:
        raise ValueError("nothing to dump")
    N = scenarios[0].p_load.size
    U = scenarios[0].solar_avail.size
    header = (
        [f"p_load_{n}" for n in range(1, N + 1)]
        + [f"q_load_{n}" for n in range(1, N + 1)]
        + [f"solar_{u}" for u in range(U)]
    )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in scenarios:
            w.writerow([repr(float(v)) for v in np.concatenate([s.p_load, s.q_load, s.solar_avail])])
