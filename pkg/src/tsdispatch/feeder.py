"""Radial feeder data and linearized (LinDistFlow) sensitivity matrices.

Buses are numbered ``0..N`` with bus 0 the substation. Line ``n`` is the line
feeding bus ``n``; it is always stored oriented away from the substation.
Power quantities are in MW / MVAr, impedances in per unit on the feeder base,
and every voltage quantity is a *squared* per-unit magnitude.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "FeederError",
    "Line",
    "PVUnit",
    "DieselUnit",
    "Prices",
    "VoltageRegions",
    "FeederModel",
    "SensitivityBundle",
    "load_feeder",
    "feeder_from_dict",
    "build_incidence",
    "build_sensitivity",
    "voltages",
    "line_flows",
    "losses_quadratic",
    "substation_injection",
    "bundled_feeder_path",
]


class FeederError(ValueError):
    """Malformed or physically invalid feeder description."""


@dataclass(frozen=True)
class Line:
    source: int
    dest: int
    r: float
    x: float
    s_max: float
    reoriented: bool = False


@dataclass(frozen=True)
class PVUnit:
    bus: int
    rating: float
    s_max: float
    pf_min: float

    @property
    def phi(self) -> float:
        """Reactive-to-active ratio allowed by the power-factor floor."""
        return math.tan(math.acos(self.pf_min))


@dataclass(frozen=True)
class DieselUnit:
    bus: int
    p_min: float
    p_max: float
    cost_linear: float
    cost_quadratic: float


@dataclass(frozen=True)
class Prices:
    beta: float
    gamma_buy: float
    gamma_sell: float
    pv_compensation: tuple[float, ...]


@dataclass(frozen=True)
class VoltageRegions:
    a_min: float
    a_max: float
    b_min: float
    b_max: float
    sub_min: float
    sub_max: float

    def with_tight(self, a_min: float, a_max: float) -> "VoltageRegions":
        return VoltageRegions(a_min, a_max, self.b_min, self.b_max, self.sub_min, self.sub_max)


@dataclass(frozen=True)
class FeederModel:
    """Static description of one radial feeder.

    ``lines[n - 1]`` feeds bus ``n``. ``p_load`` / ``q_load`` are nominal
    per-bus means for buses ``1..N``.
    """

    name: str
    n_bus: int
    lines: tuple[Line, ...]
    p_load: np.ndarray
    q_load: np.ndarray
    pv_units: tuple[PVUnit, ...]
    diesel_units: tuple[DieselUnit, ...]
    prices: Prices
    regions: VoltageRegions
    voltage_base_kv: float = 12.0
    power_base_mva: float = 1.0
    parent: tuple[int, ...] = field(default=(), repr=False)

    @property
    def N(self) -> int:
        return self.n_bus

    @property
    def pv_buses(self) -> np.ndarray:
        return np.array([u.bus for u in self.pv_units], dtype=int)

    @property
    def diesel_buses(self) -> np.ndarray:
        return np.array([d.bus for d in self.diesel_units], dtype=int)

    @property
    def pv_map(self) -> np.ndarray:
        """N x U matrix placing PV injections at their buses."""
        m = np.zeros((self.N, len(self.pv_units)))
        for u, unit in enumerate(self.pv_units):
            m[unit.bus - 1, u] = 1.0
        return m

    @property
    def diesel_map(self) -> np.ndarray:
        m = np.zeros((self.N, len(self.diesel_units)))
        for d, unit in enumerate(self.diesel_units):
            m[unit.bus - 1, d] = 1.0
        return m

    def replace(self, **changes) -> "FeederModel":
        from dataclasses import replace

        return replace(self, **changes)

    def scaled_loads(self, factor: float) -> "FeederModel":
        return self.replace(p_load=self.p_load * factor, q_load=self.q_load * factor)


@dataclass(frozen=True)
class SensitivityBundle:
    F: np.ndarray
    R: np.ndarray
    X: np.ndarray
    r: np.ndarray
    x: np.ndarray

    @property
    def N(self) -> int:
        return self.F.shape[0]


def bundled_feeder_path(name: str = "feeder15.json") -> Path:
    return Path(__file__).parent / "data" / name


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise FeederError(msg)


def _tree_parents(n_bus: int, edges: list[tuple[int, int]]) -> tuple[list[int], list[bool]]:
    """Orient edges away from bus 0; return parent of each bus and per-edge flip flags."""
    _require(len(edges) == n_bus, f"non-radial: {len(edges)} lines for {n_bus + 1} buses")
    adj: dict[int, list[tuple[int, int]]] = {b: [] for b in range(n_bus + 1)}
    for k, (a, b) in enumerate(edges):
        _require(0 <= a <= n_bus and 0 <= b <= n_bus, f"line {k} references unknown bus")
        _require(a != b, f"line {k} is a self-loop")
        adj[a].append((b, k))
        adj[b].append((a, k))
    parent = [-1] * (n_bus + 1)
    flipped = [False] * len(edges)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for w, k in adj[u]:
            if w in seen:
                if parent[u] != w:
                    raise FeederError("non-radial: topology contains a cycle")
                continue
            seen.add(w)
            parent[w] = u
            flipped[k] = edges[k][0] != u
            stack.append(w)
    _require(len(seen) == n_bus + 1, "non-radial: topology is disconnected")
    return parent, flipped


def feeder_from_dict(doc: dict) -> FeederModel:
    """Build and validate a :class:`FeederModel` from a parsed feeder document."""
    try:
        buses = sorted(doc["buses"], key=lambda b: int(b["index"]))
        n_bus = len(buses) - 1
        _require(n_bus >= 1, "feeder needs at least one non-substation bus")
        _require(
            [int(b["index"]) for b in buses] == list(range(n_bus + 1)),
            "bus indices must be 0..N without gaps",
        )
        raw_lines = doc["lines"]
        edges = [(int(ln["from"]), int(ln["to"])) for ln in raw_lines]
        parent, flipped = _tree_parents(n_bus, edges)

        by_dest: dict[int, Line] = {}
        for k, ln in enumerate(raw_lines):
            a, b = edges[k]
            src, dst = (b, a) if flipped[k] else (a, b)
            line = Line(src, dst, float(ln["r"]), float(ln["x"]), float(ln["s_max"]), flipped[k])
            _require(line.r > 0 and line.x > 0, f"line {src}-{dst}: r and x must be positive")
            _require(line.s_max > 0, f"line {src}-{dst}: s_max must be positive")
            by_dest[dst] = line
        lines = tuple(by_dest[n] for n in range(1, n_bus + 1))

        p_load = np.array([float(b.get("p_load", 0.0)) for b in buses[1:]])
        q_load = np.array([float(b.get("q_load", 0.0)) for b in buses[1:]])
        _require(float(buses[0].get("p_load", 0.0)) == 0.0, "substation bus cannot carry load")
        _require(np.all(p_load >= 0), "nominal active loads must be nonnegative")

        pv = []
        for u in doc.get("pv_units", []):
            unit = PVUnit(int(u["bus"]), float(u["rating"]), float(u["s_max"]), float(u["pf_min"]))
            _require(1 <= unit.bus <= n_bus, f"PV unit at unknown bus {unit.bus}")
            _require(unit.rating > 0 and unit.s_max > 0, "PV rating and inverter limit must be positive")
            _require(0 < unit.pf_min <= 1, "PV power-factor floor must lie in (0, 1]")
            pv.append(unit)
        _require(len({u.bus for u in pv}) == len(pv), "at most one PV unit per bus")

        diesel = []
        for d in doc.get("diesel_units", []):
            unit = DieselUnit(
                int(d["bus"]),
                float(d.get("p_min", 0.0)),
                float(d["p_max"]),
                float(d["cost_linear"]),
                float(d.get("cost_quadratic", 0.0)),
            )
            _require(1 <= unit.bus <= n_bus, f"diesel unit at unknown bus {unit.bus}")
            _require(0 <= unit.p_min <= unit.p_max, f"diesel at bus {unit.bus}: need 0 <= p_min <= p_max")
            _require(unit.cost_quadratic >= 0, "diesel quadratic cost must be nonnegative")
            diesel.append(unit)

        pr = doc["prices"]
        pi = pr.get("pv_compensation", 35.0)
        pi = tuple(float(v) for v in pi) if isinstance(pi, list) else (float(pi),) * len(pv)
        _require(len(pi) == len(pv), "one PV compensation price per PV unit")
        _require(all(v >= 0 for v in pi), "PV compensation prices must be nonnegative")
        prices = Prices(float(pr["beta"]), float(pr["gamma_buy"]), float(pr["gamma_sell"]), pi)
        _require(
            0 < prices.gamma_sell < prices.beta < prices.gamma_buy,
            "arbitrage condition violated: need 0 < gamma_sell < beta < gamma_buy",
        )

        vr = doc["voltage_regions"]
        regions = VoltageRegions(
            float(vr["tight"][0]), float(vr["tight"][1]),
            float(vr["loose"][0]), float(vr["loose"][1]),
            float(vr["substation"][0]), float(vr["substation"][1]),
        )
        _validate_regions(regions)

        base = doc.get("base", {})
        return FeederModel(
            name=str(doc.get("name", "feeder")),
            n_bus=n_bus,
            lines=lines,
            p_load=p_load,
            q_load=q_load,
            pv_units=tuple(pv),
            diesel_units=tuple(diesel),
            prices=prices,
            regions=regions,
            voltage_base_kv=float(base.get("voltage_kV", 12.0)),
            power_base_mva=float(base.get("power_MVA", 1.0)),
            parent=tuple(parent),
        )
    except (KeyError, TypeError) as exc:
        raise FeederError(f"malformed feeder document: {exc!r}") from exc


def _validate_regions(reg: VoltageRegions) -> None:
    _require(
        0 < reg.b_min <= reg.a_min < reg.a_max <= reg.b_max,
        "voltage regions must nest: b_min <= a_min < a_max <= b_max",
    )
    _require(0 < reg.sub_min <= reg.sub_max, "substation voltage range is empty")


def load_feeder(path: str | Path) -> FeederModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederError(f"cannot parse {path}: {exc}") from exc
    return feeder_from_dict(doc)


def build_incidence(model: FeederModel) -> tuple[np.ndarray, np.ndarray]:
    """Branch-bus incidence split into the substation column ``a0`` and reduced ``A``.

    Row ``n - 1`` is line ``n``: +1 at its source bus, -1 at its destination.
    """
    N = model.N
    full = np.zeros((N, N + 1))
    for i, line in enumerate(model.lines):
        full[i, line.source] = 1.0
        full[i, line.dest] = -1.0
    return full[:, 0].copy(), full[:, 1:].copy()


def _inverse_incidence(model: FeederModel) -> np.ndarray:
    # A = -(I - P) with P[n, parent(n)] = 1, so A^{-1}[n, m] = -1 iff bus m+1
    # lies on the path from the substation to bus n+1 (inclusive).
    N = model.N
    F = np.zeros((N, N))
    for n in range(1, N + 1):
        b = n
        while b != 0:
            F[n - 1, b - 1] = -1.0
            b = model.parent[b]
    return F


def build_sensitivity(model: FeederModel) -> SensitivityBundle:
    _, A = build_incidence(model)
    F = _inverse_incidence(model)
    if not np.allclose(A @ F, np.eye(model.N), atol=1e-10, rtol=0):
        raise FeederError("reduced incidence matrix is singular")
    scale = 1.0 / model.power_base_mva
    r = np.array([ln.r for ln in model.lines]) * scale
    x = np.array([ln.x for ln in model.lines]) * scale
    R = (F * r) @ F.T
    X = (F * x) @ F.T
    return SensitivityBundle(F=F, R=R, X=X, r=r, x=x)


def voltages(S: SensitivityBundle, p, q, v0: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[-1] != S.N or q.shape[-1] != S.N:
        raise ValueError(f"injection vectors must have length {S.N}")
    return 2.0 * p @ S.R + 2.0 * q @ S.X + v0


def line_flows(S: SensitivityBundle, p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[-1] != S.N or q.shape[-1] != S.N:
        raise ValueError(f"injection vectors must have length {S.N}")
    return p @ S.F, q @ S.F


def losses_quadratic(S: SensitivityBundle, p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(p @ S.R @ p + q @ S.R @ q)


def substation_injection(S: SensitivityBundle, p, q) -> float:
    """Active power drawn at the substation, net injections plus quadratic losses."""
    P, Q = line_flows(S, p, q)
    return float(-np.sum(p) + np.sum(S.r * (P**2 + Q**2)))
