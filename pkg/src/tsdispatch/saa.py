"""Deterministic equivalent of the average dispatch over a finite scenario list.

Written directly in cvxpy from the grid equations (line flows, per-line losses,
voltage model), independently of the hand-assembled slot programs in
:mod:`tsdispatch.subproblem`. It serves as a correctness oracle for the
stochastic primal-dual iteration and supplies the slow decision of the
expected-value baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .feeder import FeederModel, SensitivityBundle
from .scenario import Scenario
from .subproblem import SlowDecision

__all__ = ["SAAResult", "SAAInfeasible", "solve_saa", "default_p0a_box"]


class SAAInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class SAAResult:
    z: SlowDecision
    cost: float
    slow_cost: float
    mean_slot_cost: float
    mean_voltage: np.ndarray
    status: str


def default_p0a_box(p_mean) -> tuple[float, float]:
    return 0.0, 2.0 * float(np.sum(p_mean))


def solve_saa(
    model: FeederModel,
    S: SensitivityBundle,
    scenarios: list[Scenario],
    p0a_box: tuple[float, float],
    z_fixed: SlowDecision | None = None,
    mean_region: str = "tight",
) -> SAAResult:
    """Minimize slow cost plus empirical-mean slot cost.

    Every scenario gets its own recourse; voltages stay in the loose box per
    scenario and their empirical mean in the tight box (``mean_region="tight"``)
    or only the loose box (``"loose"``). With ``z_fixed`` the slow decision is
    pinned and the result is that decision's optimal empirical recourse.
    """
    K = len(scenarios)
    if K < 1:
        raise ValueError("need at least one scenario")
    N, U, D = model.N, len(model.pv_units), len(model.diesel_units)
    reg, pr = model.regions, model.prices
    pv_idx = model.pv_buses - 1
    d_idx = model.diesel_buses - 1

    solar = np.array([s.solar_avail for s in scenarios]).reshape(K, U)
    pl = np.array([s.p_load for s in scenarios])
    ql = np.array([s.q_load for s in scenarios])

    if z_fixed is None:
        v0a = cp.Variable()
        p0a = cp.Variable()
        pd = cp.Variable(D)
    else:
        v0a = cp.Constant(z_fixed.v0a)
        p0a = cp.Constant(z_fixed.p0a)
        pd = cp.Constant(np.asarray(z_fixed.p_d, dtype=float))

    pr_ = cp.Variable((K, U))
    qr_ = cp.Variable((K, U))
    dlt = cp.Variable(K)

    # nodal injections as affine expressions (K x N)
    Er = model.pv_map
    Ed = model.diesel_map
    p = pr_ @ Er.T - pl + (cp.reshape(pd, (1, D), order="C") @ Ed.T if D else 0)
    q = qr_ @ Er.T - ql
    Pf = p @ S.F  # line flows, K x N
    Qf = q @ S.F
    v = 2 * p @ S.R + 2 * q @ S.X + v0a

    cons = []
    if z_fixed is None:
        cons += [
            v0a >= reg.sub_min,
            v0a <= reg.sub_max,
            p0a >= p0a_box[0],
            p0a <= p0a_box[1],
        ]
        if D:
            cons += [pd >= [d.p_min for d in model.diesel_units], pd <= [d.p_max for d in model.diesel_units]]
    # substation draw must cover net demand plus per-line losses
    loss = cp.sum(cp.multiply(np.broadcast_to(S.r, (K, N)), cp.square(Pf) + cp.square(Qf)), axis=1)
    cons.append(p0a + dlt >= -cp.sum(p, axis=1) + loss)
    smax = np.array([ln.s_max for ln in model.lines])
    for n in range(N):
        cons.append(cp.norm(cp.hstack([Pf[:, n:n + 1], Qf[:, n:n + 1]]), 2, axis=1) <= smax[n])
    if U:
        phi = np.array([u.phi for u in model.pv_units])
        smax_inv = np.array([u.s_max for u in model.pv_units])
        cons += [pr_ >= 0, pr_ <= solar, cp.abs(qr_) <= pr_ @ np.diag(phi)]
        for u in range(U):
            cons.append(cp.norm(cp.hstack([pr_[:, u:u + 1], qr_[:, u:u + 1]]), 2, axis=1) <= smax_inv[u])
    cons += [v >= reg.b_min, v <= reg.b_max]
    vbar = cp.sum(v, axis=0) / K
    if mean_region == "tight":
        cons += [vbar >= reg.a_min, vbar <= reg.a_max]

    dev = cp.maximum(pr.gamma_buy * dlt, pr.gamma_sell * dlt)
    pv_pay = cp.pos(pr_ - pl[:, pv_idx]) @ np.asarray(pr.pv_compensation) if U else 0
    mean_slot = cp.sum(dev + pv_pay) / K
    a = np.array([d.cost_linear for d in model.diesel_units])
    b = np.array([d.cost_quadratic for d in model.diesel_units])
    slow = pr.beta * p0a + (a @ pd + b @ cp.square(pd) if D else 0)

    prob = cp.Problem(cp.Minimize(slow + mean_slot), cons)
    prob.solve(solver=cp.CLARABEL, tol_feas=1e-9, tol_gap_abs=1e-9, tol_gap_rel=1e-9)
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise SAAInfeasible(f"deterministic equivalent is {prob.status}")

    z = z_fixed or SlowDecision(float(v0a.value), float(p0a.value), np.atleast_1d(np.asarray(pd.value, dtype=float)).copy())
    return SAAResult(
        z=z,
        cost=float(prob.value),
        slow_cost=float(slow.value),
        mean_slot_cost=float(mean_slot.value),
        mean_voltage=np.asarray(vbar.value, dtype=float),
        status=prob.status,
    )
