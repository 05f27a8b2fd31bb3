import copy

import numpy as np
import pytest

from tsdispatch.feeder import build_sensitivity, bundled_feeder_path, feeder_from_dict, load_feeder

TWO_BUS = {
    "name": "two-bus",
    "buses": [{"index": 0}, {"index": 1, "p_load": 1.0, "q_load": 0.2}],
    "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.02, "s_max": 10.0}],
    "pv_units": [{"bus": 1, "rating": 1.5, "s_max": 2.0, "pf_min": 0.8}],
    "diesel_units": [],
    "prices": {"beta": 37.0, "gamma_buy": 45.0, "gamma_sell": 19.0, "pv_compensation": 5.0},
    "voltage_regions": {
        "tight": [0.98**2, 1.02**2],
        "loose": [0.95**2, 1.05**2],
        "substation": [0.97**2, 1.03**2],
    },
    "base": {"voltage_kV": 12.0, "power_MVA": 1.0},
}


def make_doc(base=TWO_BUS, **changes):
    doc = copy.deepcopy(base)
    doc.update(copy.deepcopy(changes))
    return doc


def path_doc(r, x=None, loads=None):
    n = len(r)
    x = x if x is not None else [2 * v for v in r]
    loads = loads if loads is not None else [0.1] * n
    return make_doc(
        name="path",
        buses=[{"index": 0}] + [{"index": i + 1, "p_load": loads[i], "q_load": 0.0} for i in range(n)],
        lines=[{"from": i, "to": i + 1, "r": r[i], "x": x[i], "s_max": 10.0} for i in range(n)],
        pv_units=[],
    )


@pytest.fixture(scope="session")
def feeder15():
    return load_feeder(bundled_feeder_path())


@pytest.fixture(scope="session")
def sens15(feeder15):
    return build_sensitivity(feeder15)


@pytest.fixture
def two_bus():
    m = feeder_from_dict(make_doc())
    return m, build_sensitivity(m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting -------------------------------------------------------

ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}
CRITERIA = {
    1: "oracle equivalence",
    2: "ergodic voltage satisfaction",
    3: "probabilistic target",
    4: "hard limits",
    5: "cost ordering",
    6: "matrix identities",
    7: "dual correctness",
    8: "brute-force subproblem",
    9: "sliding-average and update arithmetic",
    10: "determinism",
}


def record_criterion(n: int, part: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE.setdefault(n, []).append((part, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        parts = ACCEPTANCE.get(n)
        if not parts:
            tr.write_line(f"CRITERION {n}: NOT RUN | {name}")
            continue
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        tr.write_line(f"CRITERION {n}: {verdict} | {name}")
        for part, ok, detail in parts:
            tr.write_line(f"    [{'pass' if ok else 'FAIL'}] {part}: {detail}")
