import dataclasses
import math

import numpy as np
import pytest

from tsdispatch.dispatch import iid_sampler
from tsdispatch.feeder import build_sensitivity, feeder_from_dict
from tsdispatch.scenario import Scenario, rng_stream, spec_for
from tsdispatch.subproblem import (
    SlowDecision,
    SolverSettings,
    Status,
    build_fast_average,
    build_fast_loose,
    build_fast_tight,
    cost_deviation,
    cost_diesel,
    cost_pv,
    dump_program,
    primal_residual,
    slot_cost,
    slow_cost,
    solve,
)

from conftest import make_doc


# --- costs -----------------------------------------------------------------

def test_deviation_cost_examples():
    assert cost_deviation(1.0, 45.0, 19.0) == 45.0
    assert cost_deviation(-1.0, 45.0, 19.0) == -19.0
    assert cost_deviation(0.0, 45.0, 19.0) == 0.0


def test_diesel_cost_examples():
    assert cost_diesel([0.5], [30], [15]) == pytest.approx(18.75)
    assert cost_diesel([0.0], [30], [15]) == 0.0
    assert cost_diesel([0.5] * 8, [30] * 8, [15] * 8) == pytest.approx(150.0)


def test_pv_cost_examples():
    assert cost_pv([0.5, 1.0], [1.0, 2.0], [10, 10]) == 0.0
    assert cost_pv([2.0, 3.0], [1.0, 1.0], [10, 10]) == pytest.approx(30.0)
    assert cost_pv([5.0, 7.0], [1.0, 1.0], [0, 0]) == 0.0


def test_slow_cost(feeder15):
    z = SlowDecision(1.0, 2.0, np.array([0.5, 0.5, 0.5]))
    assert slow_cost(feeder15, z) == pytest.approx(37.0 * 2.0 + 3 * 18.75)


# --- helpers ----------------------------------------------------------------

def xi_two_bus(solar=1.0, pl=1.0, ql=0.2):
    return Scenario(np.array([solar]), np.array([pl]), np.array([ql]))


def brute_force_two_bus(model, z, xi, nu_l=0.0, nu_u=0.0, step=0.01):
    """Grid search over inverter setpoints; the deviation is set at its cheapest feasible value."""
    pv = model.pv_units[0]
    line = model.lines[0]
    reg, pr = model.regions, model.prices
    r, x = line.r / model.power_base_mva, line.x / model.power_base_mva
    best = math.inf
    n_p = int(round(xi.solar_avail[0] / step))
    for i in range(n_p + 1):
        p_r = i * step
        qmax = min(pv.phi * p_r, math.sqrt(max(pv.s_max**2 - p_r**2, 0.0)))
        n_q = int(math.floor(qmax / step + 1e-9))
        for j in range(-n_q, n_q + 1):
            q_r = j * step
            p = p_r - xi.p_load[0]
            q = q_r - xi.q_load[0]
            if p**2 + q**2 > line.s_max**2:
                continue
            v = z.v0a + 2 * r * p + 2 * x * q
            if not reg.b_min <= v <= reg.b_max:
                continue
            dlt = -p + r * (p**2 + q**2) - z.p0a
            cost = max(pr.gamma_buy * dlt, pr.gamma_sell * dlt)
            cost += pr.pv_compensation[0] * max(0.0, p_r - xi.p_load[0])
            cost += (nu_u - nu_l) * v
            best = min(best, cost)
    return best


def grid_increment(model, step=0.01):
    pr = model.prices
    return step * (1.1 * pr.gamma_buy + pr.pv_compensation[0])


Z2 = SlowDecision(1.0, 0.3, np.zeros(0))


# --- programs ---------------------------------------------------------------

def test_zero_multipliers_give_slot_cost(feeder15, sens15):
    xi = iid_sampler(spec_for(feeder15))()
    z = SlowDecision(1.0, 0.4, np.full(3, 0.25))
    res = solve(build_fast_average(feeder15, sens15, z, np.zeros(15), np.zeros(15), xi))
    assert res.ok
    assert res.objective == pytest.approx(res.slot_cost, abs=1e-7)
    assert res.slot_cost == pytest.approx(slot_cost(feeder15, res.y, xi), abs=1e-6)


@pytest.mark.parametrize("nu_l, nu_u", [(0.0, 0.0), (0.0, 40.0), (60.0, 0.0)])
@pytest.mark.parametrize("solar, pl, p0a", [(1.0, 1.0, 0.3), (1.5, 0.4, -0.2), (0.6, 1.2, 0.9)])
def test_brute_force_two_bus_average(two_bus, nu_l, nu_u, solar, pl, p0a):
    m, S = two_bus
    z = SlowDecision(1.0, p0a, np.zeros(0))
    xi = xi_two_bus(solar, pl)
    res = solve(build_fast_average(m, S, z, [nu_l], [nu_u], xi))
    grid = brute_force_two_bus(m, z, xi, nu_l, nu_u)
    assert res.objective <= grid + 1e-6
    assert grid - res.objective <= grid_increment(m)


def test_brute_force_two_bus_binding_voltage():
    # narrow loose box so the voltage limit shapes the optimum
    doc = make_doc(voltage_regions={"tight": [0.995, 1.002], "loose": [0.99, 1.004], "substation": [0.97, 1.03]})
    m = feeder_from_dict(doc)
    S = build_sensitivity(m)
    xi = xi_two_bus(solar=1.5, pl=0.3)
    res = solve(build_fast_loose(m, S, Z2, xi))
    assert res.ok
    assert res.y.v[0] == pytest.approx(1.004, abs=1e-6)
    grid = brute_force_two_bus(m, Z2, xi)
    assert res.objective <= grid + 1e-6
    assert grid - res.objective <= grid_increment(m)


def test_no_solar_no_output(two_bus):
    m, S = two_bus
    res = solve(build_fast_average(m, S, Z2, [0.0], [0.0], xi_two_bus(solar=0.0)))
    assert res.ok
    assert abs(res.y.p_r[0]) < 1e-7 and abs(res.y.q_r[0]) < 1e-7


def test_trivial_program():
    doc = make_doc(buses=[{"index": 0}, {"index": 1, "p_load": 0.0, "q_load": 0.0}])
    m = feeder_from_dict(doc)
    S = build_sensitivity(m)
    res = solve(build_fast_loose(m, S, SlowDecision(1.0, 0.0, np.zeros(0)), xi_two_bus(0.0, 0.0, 0.0)))
    assert res.ok
    assert res.objective == pytest.approx(0.0, abs=1e-7)


def test_tight_infeasible_when_every_setpoint_overvolts():
    # resistive line: injecting active power raises voltage more than reactive absorption lowers it
    doc = make_doc(
        buses=[{"index": 0}, {"index": 1, "p_load": 0.0, "q_load": 0.0}],
        lines=[{"from": 0, "to": 1, "r": 0.05, "x": 0.01, "s_max": 10.0}],
    )
    m = feeder_from_dict(doc)
    S = build_sensitivity(m)
    z = SlowDecision(1.025**2, 0.0, np.zeros(0))
    xi = xi_two_bus(solar=1.5, pl=0.0, ql=0.0)
    assert solve(build_fast_tight(m, S, z, xi)).status is Status.INFEASIBLE
    assert solve(build_fast_loose(m, S, z, xi)).ok
    soft = solve(build_fast_tight(m, S, z, xi, soft=True))
    assert soft.ok and soft.y.v[0] == pytest.approx(1.025**2, abs=1e-6)


def test_equal_regions_make_tight_equal_loose(feeder15, sens15):
    reg = feeder15.regions
    m = feeder15.replace(regions=reg.with_tight(reg.b_min, reg.b_max))
    S = build_sensitivity(m)
    z = SlowDecision(1.0, 0.3, np.full(3, 0.2))
    for xi in [iid_sampler(spec_for(m), stream=s)() for s in range(3)]:
        a = solve(build_fast_tight(m, S, z, xi))
        b = solve(build_fast_loose(m, S, z, xi))
        assert a.objective == pytest.approx(b.objective, rel=1e-7, abs=1e-6)


def test_tight_never_cheaper_than_loose(feeder15, sens15):
    draw = iid_sampler(spec_for(feeder15), stream=11)
    g = np.random.default_rng(0)
    reg = feeder15.regions
    inside = 0
    for _ in range(25):
        xi = draw()
        z = SlowDecision(g.uniform(reg.sub_min, reg.sub_max), g.uniform(0, 1.5), g.uniform(0, 0.5, 3))
        loose = solve(build_fast_loose(feeder15, sens15, z, xi))
        tight = solve(build_fast_tight(feeder15, sens15, z, xi))
        assert loose.ok
        if tight.ok:
            assert tight.objective >= loose.objective * (1 - 1e-7) - 1e-6
        v = loose.y.v
        if np.all((v >= reg.a_min) & (v <= reg.a_max)):
            inside += 1
            assert tight.objective == pytest.approx(loose.objective, rel=1e-7, abs=1e-6)
    assert inside > 0


def test_solution_structure(feeder15, sens15):
    xi = iid_sampler(spec_for(feeder15), stream=4)()
    z = SlowDecision(1.0, 0.3, np.full(3, 0.2))
    prog = build_fast_average(feeder15, sens15, z, np.zeros(15), np.full(15, 3.0), xi)
    res = solve(prog)
    y = res.y
    # voltage model and balance rows hold at the solution
    np.testing.assert_allclose(y.v, 2 * sens15.R @ y.p + 2 * sens15.X @ y.q + z.v0a, atol=1e-7)
    np.testing.assert_allclose(y.p, feeder15.pv_map @ y.p_r - xi.p_load + feeder15.diesel_map @ z.p_d, atol=1e-7)
    np.testing.assert_allclose(y.q, feeder15.pv_map @ y.q_r - xi.q_load, atol=1e-7)
    assert y.p0 - y.p0_delta == pytest.approx(z.p0a, abs=1e-7)
    assert primal_residual(prog, res) <= 1e-6
    # epigraph exactness; 1e-8 needs solver tolerances below the default
    tight = solve(prog, SolverSettings(1e-10, 1e-10, 1e-10, 400))
    x = tight.extra["x"]
    L = prog.template.layout
    pr = feeder15.prices
    exact = float(cost_deviation(tight.y.p0_delta, pr.gamma_buy, pr.gamma_sell))
    assert x[L.tdev] == pytest.approx(exact, abs=1e-8)
    exact_pv = np.maximum(tight.y.p_r - xi.p_load[feeder15.pv_buses - 1], 0.0)
    np.testing.assert_allclose(x[L.tpv], exact_pv, atol=1e-8)
    # loss relaxation diagnostic: slack is nonnegative
    assert y.p0 - (-y.p.sum() + y.p @ sens15.R @ y.p + y.q @ sens15.R @ y.q) >= -1e-7


def test_constraint_tags(feeder15, sens15):
    xi = iid_sampler(spec_for(feeder15))()
    z = SlowDecision(1.0, 0.3, np.full(3, 0.2))
    N, U = 15, 2
    common = {
        "active_balance", "reactive_balance", "substation_block", "voltage_model",
        "epigraph_deviation", "epigraph_pv", "inverter_active", "inverter_power_factor",
        "voltage_loose", "losses",
    }
    common |= {f"line_limit_{n}" for n in range(1, N + 1)}
    common |= {f"inverter_apparent_{u}" for u in range(U)}
    avg = build_fast_average(feeder15, sens15, z, np.zeros(N), np.zeros(N), xi)
    assert set(avg.tags) == common
    assert set(build_fast_loose(feeder15, sens15, z, xi).tags) == common
    assert set(build_fast_tight(feeder15, sens15, z, xi).tags) == common | {"voltage_tight"}
    assert avg.coupling == ("active_balance", "substation_block", "voltage_model")
    assert avg.A.shape[0] == sum(s.stop - s.start for s in avg.tags.values())


def test_multiplier_validation(feeder15, sens15):
    xi = iid_sampler(spec_for(feeder15))()
    z = SlowDecision(1.0, 0.3, np.full(3, 0.2))
    with pytest.raises(ValueError, match="nonnegative"):
        build_fast_average(feeder15, sens15, z, -np.ones(15), np.zeros(15), xi)
    with pytest.raises(ValueError, match="length"):
        build_fast_average(feeder15, sens15, z, np.zeros(3), np.zeros(15), xi)


def test_dump_program(two_bus):
    m, S = two_bus
    text = dump_program(build_fast_tight(m, S, Z2, xi_two_bus()))
    assert "voltage_tight" in text and "minimize" in text.lower()


# --- duals ------------------------------------------------------------------

def _check_sensitivity(dual, f_plus, f_0, f_minus, delta, fails, label):
    right = (f_plus - f_0) / delta
    left = (f_0 - f_minus) / delta
    central = (f_plus - f_minus) / (2 * delta)
    tol = 1e-2 * max(abs(central), 1.0)
    if abs(right - left) <= tol:
        if abs(dual - central) > tol:
            fails.append((label, dual, central))
    # at a kink the dual must be a subgradient: between the one-sided slopes
    elif not min(left, right) - tol <= dual <= max(left, right) + tol:
        fails.append((label, dual, left, right))


def _perturbed(prog, row, d):
    b = prog.b.copy()
    b[row] += d
    res = solve(dataclasses.replace(prog, b=b))
    assert res.ok
    return res.objective


def test_duals_match_finite_differences(feeder15, sens15):
    """Perturb every coupling right-hand side on 20 random instances."""
    m, S = feeder15, sens15
    N = m.N
    reg = m.regions
    draw = iid_sampler(spec_for(m), stream=21)
    g = rng_stream(21, 1)
    delta = 1e-4
    fails = []
    for inst in range(20):
        xi = draw()
        z = SlowDecision(g.uniform(reg.sub_min, reg.sub_max), g.uniform(0.0, 1.5), g.uniform(0.0, 0.5, 3))
        nu = np.where(g.random(2 * N) < 0.3, g.uniform(0, 50, 2 * N), 0.0)
        prog = build_fast_average(m, S, z, nu[:N], nu[N:], xi)
        res = solve(prog)
        assert res.ok
        f0 = res.objective
        lam = res.duals
        rows = {
            "active_balance": lam.lambda_p,
            "substation_block": [lam.lambda_0],
            "voltage_model": lam.lambda_v,
        }
        for tag, duals in rows.items():
            for i, row in enumerate(range(prog.tags[tag].start, prog.tags[tag].stop)):
                _check_sensitivity(duals[i], _perturbed(prog, row, delta), f0,
                                   _perturbed(prog, row, -delta), delta, fails, (inst, tag, i))
    assert not fails, fails[:5]


def _objective(model, S, z, nu, xi):
    N = model.N
    res = solve(build_fast_average(model, S, z, nu[:N], nu[N:], xi))
    assert res.ok
    return res.objective


def test_slow_decision_sensitivities(feeder15, sens15):
    """Moving z itself shifts only coupling right-hand sides, so the recourse gradient predicts it."""
    m, S = feeder15, sens15
    draw = iid_sampler(spec_for(m), stream=5)
    d = 1e-4
    for _ in range(3):
        xi = draw()
        z = SlowDecision(1.0, 0.5, np.array([0.2, 0.3, 0.25]))
        nu = np.zeros(30)
        res = solve(build_fast_average(m, S, z, nu[:15], nu[15:], xi))
        grad = res.duals.recourse_gradient(m)
        base = z.as_vector()
        for j in range(base.size):
            e = np.eye(base.size)[j] * d
            fp = _objective(m, S, SlowDecision.from_vector(base + e), nu, xi)
            fm = _objective(m, S, SlowDecision.from_vector(base - e), nu, xi)
            assert grad[j] == pytest.approx((fp - fm) / (2 * d), rel=1e-2, abs=1e-2)


def test_recourse_gradient_layout(feeder15, sens15):
    xi = iid_sampler(spec_for(feeder15))()
    z = SlowDecision(1.0, 0.3, np.full(3, 0.2))
    res = solve(build_fast_loose(feeder15, sens15, z, xi))
    grad = res.duals.recourse_gradient(feeder15)
    assert grad.shape == (5,)
    assert grad[0] == pytest.approx(res.duals.lambda_v.sum())
    assert grad[1] == res.duals.lambda_0
    np.testing.assert_array_equal(grad[2:], res.duals.lambda_p[feeder15.diesel_buses - 1])


def test_stalled_soft_tight_solve_is_rescued(feeder15, sens15):
    """A heavily penalized soft program that stalls under equilibration still solves."""
    from tsdispatch.dispatch import expected_value_decision
    from tsdispatch.scenario import sample_batch
    m = feeder15.replace(regions=feeder15.regions.with_tight(0.99**2, 1.01**2))
    S = build_sensitivity(m)
    spec = spec_for(m)
    z = expected_value_decision(m, S, spec)
    xi = sample_batch(spec, 250, rng_stream(1, 10_004))[46]
    assert solve(build_fast_tight(m, S, z, xi)).status is Status.INFEASIBLE
    prog = build_fast_tight(m, S, z, xi, soft=True)
    res = solve(prog)
    assert res.ok
    assert primal_residual(prog, res) <= 1e-6
    assert np.abs(res.y.v_slack).max() > 0
