"""Fast-timescale conic programs and their solver.

Every slot problem shares one sparse structure per (feeder, variant); only the
right-hand side (slow decision and realization) and the linear objective (voltage
multipliers) change between solves. Programs are written in the standard conic
form ``min 1/2 x'Px + c'x  s.t.  Ax + s = b, s in K`` and solved with Clarabel.

Coupling equalities, i.e. the rows linking the slow decision to the slot
variables, are written with the slow decision on the right-hand side::

    p - Er pr        = Ed pd - pl        (active balance)
    p0 - p0_delta    = p0a               (substation block)
    v - 2Rp - 2Xq    = v0a * 1           (voltage model)

Their duals are reported as sensitivities: raising a right-hand side entry by
``d`` changes the optimal value by ``dual * d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import clarabel
import numpy as np
import scipy.sparse as sp

from .feeder import FeederModel, SensitivityBundle
from .scenario import Scenario

__all__ = [
    "SlowDecision",
    "FastDecision",
    "CouplingDuals",
    "ConicProgram",
    "SolveResult",
    "Status",
    "SolverSettings",
    "cost_deviation",
    "cost_diesel",
    "cost_pv",
    "slot_cost",
    "slow_cost",
    "slow_cost_gradient",
    "build_fast_average",
    "build_fast_tight",
    "build_fast_loose",
    "solve",
    "dump_program",
    "SLACK_PENALTY",
    "TIGHT_PENALTY",
]

SLACK_PENALTY = 1.0e4  # $/h per (squared-pu)^2 of voltage outside the loose box
TIGHT_PENALTY = 1.0e5  # $/h per squared-pu of voltage outside the tight box (soft tight variant)
# slack columns carry excursions in units of 0.01 squared-pu; with raw units the
# penalized programs are badly scaled and the interior-point iterations stall
SLACK_UNIT = 1.0e-2


@dataclass(frozen=True)
class SlowDecision:
    v0a: float
    p0a: float
    p_d: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.v0a, self.p0a], np.asarray(self.p_d, dtype=float)])

    @classmethod
    def from_vector(cls, z) -> "SlowDecision":
        z = np.asarray(z, dtype=float)
        return cls(float(z[0]), float(z[1]), z[2:].copy())


@dataclass(frozen=True)
class FastDecision:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    p_r: np.ndarray
    q_r: np.ndarray
    p0: float
    p0_delta: float
    v_slack: np.ndarray | None = None


@dataclass(frozen=True)
class CouplingDuals:
    lambda_p: np.ndarray
    lambda_0: float
    lambda_v: np.ndarray

    def recourse_gradient(self, model: FeederModel) -> np.ndarray:
        """Derivative of the slot optimum with respect to ``z = (v0a, p0a, p_d)``."""
        return np.concatenate(
            [[self.lambda_v.sum(), self.lambda_0], self.lambda_p[model.diesel_buses - 1]]
        )


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverSettings:
    tol_feas: float = 1e-8
    tol_gap_rel: float = 1e-8
    tol_gap_abs: float = 1e-8
    max_iter: int = 200


# ---------------------------------------------------------------------------
# costs


def cost_deviation(p0_delta, gamma_buy: float, gamma_sell: float):
    return np.maximum(gamma_buy * np.asarray(p0_delta), gamma_sell * np.asarray(p0_delta))


def cost_diesel(p_d, cost_linear, cost_quadratic) -> float:
    p_d = np.asarray(p_d, dtype=float)
    return float(np.sum(np.asarray(cost_linear) * p_d + np.asarray(cost_quadratic) * p_d**2))


def cost_pv(p_r, p_l_at_pv, pi) -> float:
    surplus = np.maximum(0.0, np.asarray(p_r, dtype=float) - np.asarray(p_l_at_pv, dtype=float))
    return float(np.dot(np.asarray(pi, dtype=float), surplus))


def slot_cost(model: FeederModel, y: FastDecision, xi: Scenario) -> float:
    """Fast-timescale cost g_t: deviation charge plus PV compensation."""
    pr = model.prices
    dev = float(cost_deviation(y.p0_delta, pr.gamma_buy, pr.gamma_sell))
    return dev + cost_pv(y.p_r, xi.p_load[model.pv_buses - 1], pr.pv_compensation)


def slow_cost(model: FeederModel, z: SlowDecision) -> float:
    """Slow-timescale cost f(z): diesel generation plus the pre-purchased block."""
    a = [d.cost_linear for d in model.diesel_units]
    b = [d.cost_quadratic for d in model.diesel_units]
    return cost_diesel(z.p_d, a, b) + model.prices.beta * z.p0a


def slow_cost_gradient(model: FeederModel, z: SlowDecision) -> np.ndarray:
    a = np.array([d.cost_linear for d in model.diesel_units])
    b = np.array([d.cost_quadratic for d in model.diesel_units])
    return np.concatenate([[0.0, model.prices.beta], a + 2.0 * b * np.asarray(z.p_d)])


# ---------------------------------------------------------------------------
# program structure


class _Layout:
    """Column offsets of the slot variables."""

    def __init__(self, N: int, U: int, soft: bool):
        self.N, self.U = N, U
        o = 0

        def take(n):
            nonlocal o
            s = slice(o, o + n)
            o += n
            return s

        self.p = take(N)
        self.q = take(N)
        self.v = take(N)
        self.pr = take(U)
        self.qr = take(U)
        self.p0 = o
        o += 1
        self.dlt = o
        o += 1
        self.tdev = o
        o += 1
        self.tpv = take(U)
        self.slo = take(N) if soft else None
        self.shi = take(N) if soft else None
        self.n = o


class _RowBlock:
    def __init__(self, tag: str, A, b0, Bz=None, Bxi=None):
        self.tag = tag
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        m = self.A.shape[0]
        self.b0 = np.broadcast_to(np.asarray(b0, dtype=float), (m,)).copy()
        self.Bz = Bz
        self.Bxi = Bxi


@dataclass
class _Template:
    kind: str
    soft: bool
    layout: _Layout
    P: sp.csc_matrix
    A: sp.csc_matrix
    b0: np.ndarray
    Bz: np.ndarray  # rows x nz
    Bxi: np.ndarray  # rows x (U + 2N)
    c0: np.ndarray
    Cnu: np.ndarray  # columns x 2N (nu_lower, nu_upper)
    cones: list
    tags: dict[str, slice]
    cone_kinds: list[tuple[str, int]]


@dataclass
class ConicProgram:
    """One fully specified slot program in standard conic form.

    ``tags`` maps constraint tags to row ranges; ``coupling`` lists the tags of
    the equalities whose duals are extracted.
    """

    template: _Template
    b: np.ndarray
    c: np.ndarray
    coupling: tuple[str, ...] = ("active_balance", "substation_block", "voltage_model")

    @property
    def kind(self) -> str:
        return self.template.kind

    @property
    def tags(self) -> dict[str, slice]:
        return self.template.tags

    @property
    def A(self) -> sp.csc_matrix:
        return self.template.A

    @property
    def P(self) -> sp.csc_matrix:
        return self.template.P


def _build_template(model: FeederModel, S: SensitivityBundle, kind: str, soft: bool) -> _Template:
    N, U, D = model.N, len(model.pv_units), len(model.diesel_units)
    L = _Layout(N, U, soft)
    nz = 2 + D
    nxi = U + 2 * N
    xi_solar, xi_pl, xi_ql = slice(0, U), slice(U, U + N), slice(U + N, U + 2 * N)
    Er, Ed = model.pv_map, model.diesel_map
    pr = model.prices
    reg = model.regions
    I = np.eye(N)

    def row(m):
        return np.zeros((m, L.n))

    zero: list[_RowBlock] = []
    nonneg: list[_RowBlock] = []
    socs: list[_RowBlock] = []

    # active balance: p - Er pr = Ed pd - pl
    A = row(N)
    A[:, L.p] = I
    A[:, L.pr] = -Er
    Bz = np.zeros((N, nz))
    Bz[:, 2:] = Ed
    Bxi = np.zeros((N, nxi))
    Bxi[:, xi_pl] = -I
    zero.append(_RowBlock("active_balance", A, 0.0, Bz, Bxi))

    # reactive balance: q - Er qr = -ql
    A = row(N)
    A[:, L.q] = I
    A[:, L.qr] = -Er
    Bxi = np.zeros((N, nxi))
    Bxi[:, xi_ql] = -I
    zero.append(_RowBlock("reactive_balance", A, 0.0, None, Bxi))

    # substation block: p0 - p0_delta = p0a
    A = row(1)
    A[0, L.p0] = 1.0
    A[0, L.dlt] = -1.0
    Bz = np.zeros((1, nz))
    Bz[0, 1] = 1.0
    zero.append(_RowBlock("substation_block", A, 0.0, Bz))

    # voltage model: v - 2Rp - 2Xq = v0a 1
    A = row(N)
    A[:, L.v] = I
    A[:, L.p] = -2.0 * S.R
    A[:, L.q] = -2.0 * S.X
    Bz = np.zeros((N, nz))
    Bz[:, 0] = 1.0
    zero.append(_RowBlock("voltage_model", A, 0.0, Bz))

    # deviation-cost epigraph: gamma dlt - tdev <= 0 for both prices
    A = row(2)
    A[:, L.dlt] = [pr.gamma_buy, pr.gamma_sell]
    A[:, L.tdev] = -1.0
    nonneg.append(_RowBlock("epigraph_deviation", A, 0.0))

    # PV-compensation epigraph: pr - tpv <= pl_at_pv, -tpv <= 0
    if U:
        A = row(2 * U)
        A[:U, L.pr] = np.eye(U)
        A[:U, L.tpv] = -np.eye(U)
        A[U:, L.tpv] = -np.eye(U)
        Bxi = np.zeros((2 * U, nxi))
        Bxi[:U, xi_pl] = Er.T
        nonneg.append(_RowBlock("epigraph_pv", A, 0.0, None, Bxi))

        # inverter active limits: -pr <= 0, pr <= available solar
        A = row(2 * U)
        A[:U, L.pr] = -np.eye(U)
        A[U:, L.pr] = np.eye(U)
        Bxi = np.zeros((2 * U, nxi))
        Bxi[U:, xi_solar] = np.eye(U)
        nonneg.append(_RowBlock("inverter_active", A, 0.0, None, Bxi))

        # power-factor floor: |qr| <= phi pr
        phi = np.array([u.phi for u in model.pv_units])
        A = row(2 * U)
        A[:U, L.qr] = np.eye(U)
        A[U:, L.qr] = -np.eye(U)
        A[:U, L.pr] = -np.diag(phi)
        A[U:, L.pr] = -np.diag(phi)
        nonneg.append(_RowBlock("inverter_power_factor", A, 0.0))

    # voltage boxes; the soft variant relaxes the tight box for the tight kind
    # and the loose box otherwise
    soft_tag = "voltage_tight" if kind == "tight" else "voltage_loose"
    boxes = [("voltage_loose", reg.b_min, reg.b_max)]
    if kind == "tight":
        boxes.append(("voltage_tight", reg.a_min, reg.a_max))
    for tag, lo, hi in boxes:
        A = row(2 * N)
        A[:N, L.v] = I
        A[N:, L.v] = -I
        if soft and tag == soft_tag:
            A[:N, L.shi] = -SLACK_UNIT * I
            A[N:, L.slo] = -SLACK_UNIT * I
        nonneg.append(_RowBlock(tag, A, np.concatenate([np.full(N, hi), np.full(N, -lo)])))
    if soft:
        A = row(2 * N)
        A[:N, L.slo] = -I
        A[N:, L.shi] = -I
        nonneg.append(_RowBlock("slack_nonneg", A, 0.0))

    # losses, rotated cone: ||w||^2 <= u with u = p0 + 1'p,
    # w = [sqrt(r) F'p ; sqrt(r) F'q]; as SOC (u+1, u-1, 2w).
    sr = np.sqrt(S.r)
    A = row(2 * N + 2)
    A[0, L.p0] = -1.0
    A[0, L.p] = -1.0
    A[1, L.p0] = -1.0
    A[1, L.p] = -1.0
    A[2 : 2 + N, L.p] = -2.0 * (sr[:, None] * S.F.T)
    A[2 + N :, L.q] = -2.0 * (sr[:, None] * S.F.T)
    b0 = np.zeros(2 * N + 2)
    b0[0], b0[1] = 1.0, -1.0
    socs.append(_RowBlock("losses", A, b0))

    # line apparent-power limits: ||(f_n'p, f_n'q)|| <= S_n
    for n, line in enumerate(model.lines):
        A = row(3)
        A[1, L.p] = -S.F[:, n]
        A[2, L.q] = -S.F[:, n]
        socs.append(_RowBlock(f"line_limit_{n + 1}", A, [line.s_max, 0.0, 0.0]))

    # inverter apparent power: ||(pr, qr)|| <= s_max
    for u, unit in enumerate(model.pv_units):
        A = row(3)
        A[1, L.pr.start + u] = -1.0
        A[2, L.qr.start + u] = -1.0
        socs.append(_RowBlock(f"inverter_apparent_{u}", A, [unit.s_max, 0.0, 0.0]))

    blocks = zero + nonneg + socs
    tags: dict[str, slice] = {}
    r0 = 0
    for blk in blocks:
        m = blk.A.shape[0]
        tags[blk.tag] = slice(r0, r0 + m)
        r0 += m
    Afull = np.vstack([blk.A for blk in blocks])
    b0 = np.concatenate([blk.b0 for blk in blocks])
    Bz = np.zeros((r0, nz))
    Bxi = np.zeros((r0, nxi))
    for blk in blocks:
        sl = tags[blk.tag]
        if blk.Bz is not None:
            Bz[sl] = blk.Bz
        if blk.Bxi is not None:
            Bxi[sl] = blk.Bxi

    n_zero = sum(b.A.shape[0] for b in zero)
    n_nonneg = sum(b.A.shape[0] for b in nonneg)
    cones = [clarabel.ZeroConeT(n_zero), clarabel.NonnegativeConeT(n_nonneg)]
    cone_kinds = [("zero", n_zero), ("nonneg", n_nonneg)]
    for blk in socs:
        cones.append(clarabel.SecondOrderConeT(blk.A.shape[0]))
        cone_kinds.append(("soc", blk.A.shape[0]))

    c0 = np.zeros(L.n)
    c0[L.tdev] = 1.0
    if U:
        c0[L.tpv] = np.asarray(pr.pv_compensation)
    Cnu = np.zeros((L.n, 2 * N))
    if kind == "average":
        Cnu[L.v, :N] = -I
        Cnu[L.v, N:] = I
    Pdiag = np.zeros(L.n)
    if soft and kind == "tight":
        c0[L.slo] = TIGHT_PENALTY * SLACK_UNIT
        c0[L.shi] = TIGHT_PENALTY * SLACK_UNIT
    elif soft:
        Pdiag[L.slo] = 2.0 * SLACK_PENALTY * SLACK_UNIT**2
        Pdiag[L.shi] = 2.0 * SLACK_PENALTY * SLACK_UNIT**2

    return _Template(
        kind=kind,
        soft=soft,
        layout=L,
        P=sp.diags(Pdiag, format="csc"),
        A=sp.csc_matrix(Afull),
        b0=b0,
        Bz=Bz,
        Bxi=Bxi,
        c0=c0,
        Cnu=Cnu,
        cones=cones,
        tags=tags,
        cone_kinds=cone_kinds,
    )


class _TemplateCache:
    """Templates for one (model, sensitivity) pair, built lazily."""

    def __init__(self, model: FeederModel, S: SensitivityBundle):
        self.model, self.S = model, S
        self._t: dict[tuple[str, bool], _Template] = {}

    def get(self, kind: str, soft: bool) -> _Template:
        key = (kind, soft)
        if key not in self._t:
            self._t[key] = _build_template(self.model, self.S, kind, soft)
        return self._t[key]


_CACHE: dict[tuple[int, int], _TemplateCache] = {}


def _templates(model: FeederModel, S: SensitivityBundle) -> _TemplateCache:
    key = (id(model), id(S))
    tc = _CACHE.get(key)
    if tc is None or tc.model is not model or tc.S is not S:
        if len(_CACHE) > 64:
            _CACHE.clear()
        tc = _CACHE[key] = _TemplateCache(model, S)
    return tc


def _xi_vector(xi: Scenario) -> np.ndarray:
    return np.concatenate([xi.solar_avail, xi.p_load, xi.q_load])


def _instantiate(t: _Template, z: SlowDecision, xi: Scenario, nu=None) -> ConicProgram:
    b = t.b0 + t.Bz @ z.as_vector() + t.Bxi @ _xi_vector(xi)
    c = t.c0 if nu is None else t.c0 + t.Cnu @ nu
    return ConicProgram(t, b, np.array(c, dtype=float))


def build_fast_average(model, S, z: SlowDecision, nu_lower, nu_upper, xi: Scenario, soft=False) -> ConicProgram:
    """Slot cost plus ``(nu_upper - nu_lower)'v`` over the hard (loose) voltage box."""
    nu_lower = np.asarray(nu_lower, dtype=float)
    nu_upper = np.asarray(nu_upper, dtype=float)
    if nu_lower.shape != (model.N,) or nu_upper.shape != (model.N,):
        raise ValueError(f"voltage multipliers must have length {model.N}")
    if np.any(nu_lower < 0) or np.any(nu_upper < 0):
        raise ValueError("voltage multipliers must be nonnegative")
    t = _templates(model, S).get("average", soft)
    return _instantiate(t, z, xi, np.concatenate([nu_lower, nu_upper]))


def build_fast_tight(model, S, z: SlowDecision, xi: Scenario, soft=False) -> ConicProgram:
    """Slot cost with voltages confined to the tight region.

    ``soft=True`` prices excursions from the tight region linearly at
    ``TIGHT_PENALTY`` instead of forbidding them; the loose region stays hard.
    """
    return _instantiate(_templates(model, S).get("tight", soft), z, xi)


def build_fast_loose(model, S, z: SlowDecision, xi: Scenario, soft=False) -> ConicProgram:
    """Slot cost with voltages confined to the loose region only."""
    return _instantiate(_templates(model, S).get("loose", soft), z, xi)


# ---------------------------------------------------------------------------
# solving


@dataclass(frozen=True)
class SolveResult:
    status: Status
    y: FastDecision | None
    duals: CouplingDuals | None
    objective: float
    slot_cost: float = math.nan
    iterations: int = 0
    raw_status: str = ""
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


_OPTIMAL = {"Solved"}
_INFEASIBLE = {"PrimalInfeasible", "AlmostPrimalInfeasible"}


def _settings(s: SolverSettings, equilibrate: bool = True):
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.equilibrate_enable = equilibrate
    st.presolve_enable = False
    st.tol_feas = s.tol_feas
    st.tol_gap_rel = s.tol_gap_rel
    st.tol_gap_abs = s.tol_gap_abs
    st.max_iter = s.max_iter
    return st


_DEFAULT_SETTINGS = SolverSettings()


def solve(prog: ConicProgram, settings: SolverSettings | None = None) -> SolveResult:
    """Solve a slot program; report primal optimum, coupling duals and slot cost.

    A solve that stalls short of the tolerances is retried once without
    Ruiz equilibration, which rescues the large-penalty soft programs.
    """
    settings = settings or _DEFAULT_SETTINGS
    res = _solve_once(prog, settings, equilibrate=True)
    if res.status is Status.NUMERICAL_FAILURE:
        retry = _solve_once(prog, settings, equilibrate=False)
        if retry.status is not Status.NUMERICAL_FAILURE:
            return retry
    return res


def _solve_once(prog: ConicProgram, settings: SolverSettings, equilibrate: bool) -> SolveResult:
    t = prog.template
    solver = clarabel.DefaultSolver(t.P, prog.c, t.A, prog.b, t.cones, _settings(settings, equilibrate))
    sol = solver.solve()
    raw = str(sol.status).split(".")[-1]
    if raw in _INFEASIBLE:
        return SolveResult(Status.INFEASIBLE, None, None, math.inf, math.inf, sol.iterations, raw)
    if raw not in _OPTIMAL and raw != "AlmostSolved":
        return SolveResult(Status.NUMERICAL_FAILURE, None, None, math.nan, math.nan, sol.iterations, raw)
    x = np.asarray(sol.x)
    zd = np.asarray(sol.z)
    L = t.layout
    y = FastDecision(
        p=x[L.p].copy(),
        q=x[L.q].copy(),
        v=x[L.v].copy(),
        p_r=x[L.pr].copy(),
        q_r=x[L.qr].copy(),
        p0=float(x[L.p0]),
        p0_delta=float(x[L.dlt]),
        v_slack=SLACK_UNIT * (x[L.shi] - x[L.slo]) if t.soft else None,
    )
    tg = t.tags
    duals = CouplingDuals(
        lambda_p=-zd[tg["active_balance"]].copy(),
        lambda_0=float(-zd[tg["substation_block"]][0]),
        lambda_v=-zd[tg["voltage_model"]].copy(),
    )
    # slot cost read off the epigraph variables, which are exact at an optimum
    g = float(x[L.tdev] + t.c0[L.tpv] @ x[L.tpv])
    status = Status.OPTIMAL
    if raw == "AlmostSolved" and _primal_residual(prog, x) > 1e-6:
        status = Status.NUMERICAL_FAILURE
    return SolveResult(status, y, duals, float(sol.obj_val), g, sol.iterations, raw, {"x": x, "z": zd})


def _primal_residual(prog: ConicProgram, x: np.ndarray) -> float:
    """Largest violation of the program's constraints at ``x``."""
    t = prog.template
    s = prog.b - t.A @ x
    worst = 0.0
    r0 = 0
    for kind, m in t.cone_kinds:
        blk = s[r0 : r0 + m]
        if kind == "zero":
            worst = max(worst, float(np.max(np.abs(blk), initial=0.0)))
        elif kind == "nonneg":
            worst = max(worst, float(np.max(-blk, initial=0.0)))
        else:
            worst = max(worst, float(np.linalg.norm(blk[1:]) - blk[0]))
        r0 += m
    return worst


def primal_residual(prog: ConicProgram, result: SolveResult) -> float:
    return _primal_residual(prog, result.extra["x"])


def dump_program(prog: ConicProgram) -> str:
    """Plain-text listing of a program, one constraint row per line (debug aid)."""
    t = prog.template
    L = t.layout
    names = [""] * L.n
    for label, sl in (("p", L.p), ("q", L.q), ("v", L.v), ("pr", L.pr), ("qr", L.qr), ("tpv", L.tpv)):
        for i, j in enumerate(range(sl.start, sl.stop)):
            names[j] = f"{label}[{i}]"
    names[L.p0], names[L.dlt], names[L.tdev] = "p0", "p0_delta", "t_dev"
    if t.soft:
        for i in range(L.N):
            # slack variables are in units of SLACK_UNIT squared-pu
            names[L.slo.start + i] = f"slack_lo[{i}]"
            names[L.shi.start + i] = f"slack_hi[{i}]"

    def expr(coefs):
        terms = [f"{c:+.6g} {names[j]}" for j, c in enumerate(coefs) if c != 0.0]
        return " ".join(terms) or "0"

    out = [f"\\ kind={t.kind} soft={t.soft}", "minimize", "  " + expr(prog.c)]
    if t.soft and t.kind != "tight":
        out.append(f"  + {SLACK_PENALTY * SLACK_UNIT**2:g} * sum(slack^2)")
    out.append("subject to")
    A = t.A.toarray()
    kinds = []
    for kind, m in t.cone_kinds:
        kinds += [kind] * m
    for tag, sl in t.tags.items():
        for r in range(sl.start, sl.stop):
            rel = {"zero": "=", "nonneg": "<="}.get(kinds[r], "soc")
            out.append(f"  {tag}[{r - sl.start}]: {expr(A[r])} {rel} {prog.b[r]:.10g}")
    return "\n".join(out)
