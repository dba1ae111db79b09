import copy
import warnings

import numpy as np
import pytest

from microgrid_mpc import qcqp
from microgrid_mpc.mpc import MpcConfig, MpcState, update_efficiencies
from microgrid_mpc.oracle import (
    LocalSolution,
    NonconvexProblem,
    TrustRegionWarning,
    complete_from_voltages,
    exact_dispatch_problem,
    gap_report,
    solve_local,
)
from microgrid_mpc.qcqp import QcqpProblem, QuadConstraint

from conftest import TOY, toy_context, toy_predictions, toy_topology


def _window(topology=None, n_p=2, load_kw=40.0, pv_kw=10.0, socs=(0.6, 0.6)):
    ctx = toy_context(topology, socs)
    cfg = MpcConfig(n_p=n_p)
    pred = toy_predictions(ctx, cfg, load_kw=load_kw, pv_kw=pv_kw)
    state = MpcState(soc=np.array(socs))
    eta_ch, eta_dis = update_efficiencies(state, ctx.eff_poly, cfg)
    convex, ncvx, L, obj = exact_dispatch_problem(state, pred, cfg, ctx, eta_ch, eta_dis)
    return dict(ctx=ctx, cfg=cfg, pred=pred, state=state, eta=(eta_ch, eta_dis), convex=convex, ncvx=ncvx, L=L)


def _batteries_only():
    d = copy.deepcopy(TOY)
    d["vscs"] = [v for v in d["vscs"] if v["kind"] == "battery"]
    return toy_topology(d)


@pytest.fixture(scope="module")
def toy_window():
    w = _window()
    w["csol"] = qcqp.solve(w["convex"])
    w["local"] = solve_local(w["ncvx"], w["csol"].x)
    return w


# ---------------------------------------------------------------- small hand problems


def _hand_problem():
    # min (x-1)^2 + (y-2)^2 + p^2/10  s.t.  x*y - p = 0,  x^2 + y^2 >= 1
    Q = np.diag([2.0, 2.0, 0.2])
    base = QcqpProblem(3, Q, [-2.0, -4.0, 0.0], 5.0, lb=[-5, -5, -50], ub=[5, 5, 50])
    bil = QuadConstraint.from_block(3, [0, 1], [[0.0, 1.0], [1.0, 0.0]], [0.0, 0.0, -1.0], 0.0)
    low = QuadConstraint.from_block(3, [0, 1], 2 * np.eye(2), None, -1.0)
    return NonconvexProblem(base, [bil], [low])


def _hand_optimum():
    # stationarity: 2(x-1) + y*p/5 = 0, 2(y-2) + x*p/5 = 0 with p = xy; solve by Newton from (1, 2)
    from scipy.optimize import fsolve

    f = lambda z: [2 * (z[0] - 1) + z[1] * z[0] * z[1] / 5, 2 * (z[1] - 2) + z[0] * z[0] * z[1] / 5]  # noqa: E731
    x, y = fsolve(f, [1.0, 2.0], xtol=1e-14)
    return np.array([x, y, x * y])


def test_fixed_point_start_converges_in_one_iteration():
    p = _hand_problem()
    z = _hand_optimum()
    sol = solve_local(p, z)
    assert sol.status == "converged" and sol.iterations == 1
    np.testing.assert_allclose(sol.x, z, atol=1e-7)


def test_hand_problem_from_far_start():
    p = _hand_problem()
    sol = solve_local(p, np.array([-3.0, 4.0, 0.0]))
    assert sol.status == "converged" and sol.feasible
    np.testing.assert_allclose(sol.x, _hand_optimum(), atol=1e-5)


def test_reverse_convex_bound_enforced():
    # min x^2 + y^2 s.t. x^2 + y^2 >= 1, x = y  ->  |x| = |y| = 1/sqrt(2)
    base = QcqpProblem(2, 2 * np.eye(2), None, A=[[1.0, -1.0]], b=[0.0], lb=[-3, -3], ub=[3, 3])
    low = QuadConstraint.from_block(2, [0, 1], 2 * np.eye(2), None, -1.0)
    sol = solve_local(NonconvexProblem(base, [], [low]), np.array([2.0, 2.0]))
    assert sol.status == "converged"
    np.testing.assert_allclose(np.abs(sol.x), [2**-0.5] * 2, atol=1e-6)


def test_iteration_cap_warns_and_returns_best_feasible():
    p = _hand_problem()
    start = np.array([-3.0, 4.0, -12.0])  # feasible but far from optimal
    with pytest.warns(TrustRegionWarning):
        sol = solve_local(p, start, max_iter=1)
    assert sol.status == "max_iter"
    assert sol.feasible
    assert sol.objective <= p.objective(start)


def test_bad_problem_definitions():
    base = QcqpProblem(2)
    with pytest.raises(ValueError):
        NonconvexProblem(base, [], [QuadConstraint.from_block(2, [0, 1], -np.eye(2), None, 0.0)])
    with pytest.raises(ValueError):
        NonconvexProblem(base, trust_scale=np.zeros(2))
    with pytest.raises(ValueError):
        solve_local(NonconvexProblem(base), np.zeros(3))


# ---------------------------------------------------------------- dispatch problem


def test_exact_problem_structure(toy_window):
    w = toy_window
    nv, n_p = 3, w["cfg"].n_p
    assert len(w["ncvx"].bilinear) == nv * n_p and len(w["ncvx"].lower) == nv * n_p
    assert w["ncvx"].base.A.shape[0] == w["convex"].A.shape[0] - nv * n_p


def test_bilinear_rows_equal_true_power(toy_window, rng):
    w = toy_window
    v = rng.normal(1.0, 0.05, size=(w["cfg"].n_p, 6))
    x = complete_from_voltages(v, w["state"], w["pred"], w["cfg"], w["ctx"], *w["eta"], w["L"])
    assert np.abs(w["ncvx"].eq_residuals(x)).max() <= 1e-9


def test_local_solution_feasible(toy_window):
    loc = toy_window["local"]
    assert isinstance(loc, LocalSolution)
    assert loc.status == "converged"
    assert loc.eq_residual <= 1e-6 and loc.lower_violation <= 1e-6 and loc.base_violation <= 1e-6


def test_true_flows_of_convex_plan_break_pv_pinning(toy_window):
    # with a PV unit the true flows of the convex voltages move the PV power off
    # its setpoint, so that point is not a valid reference for the local optimum
    w = toy_window
    v = np.array([w["csol"].x[w["L"].v(k)] for k in range(w["cfg"].n_p)])
    x_true = complete_from_voltages(v, w["state"], w["pred"], w["cfg"], w["ctx"], *w["eta"], w["L"])
    assert w["ncvx"].eq_residuals(x_true).max() <= 1e-9
    assert w["ncvx"].base_violation(x_true) > 1e-3


def test_polish_property_from_true_flow_start():
    w = _window(_batteries_only(), n_p=3, load_kw=50.0)
    csol = qcqp.solve(w["convex"])
    v = np.array([csol.x[w["L"].v(k)] for k in range(3)])
    start = complete_from_voltages(v, w["state"], w["pred"], w["cfg"], w["ctx"], *w["eta"], w["L"])
    assert w["ncvx"].eq_relative(start).max() <= 1e-12
    loc = solve_local(w["ncvx"], start)
    assert loc.feasible
    assert loc.objective <= w["ncvx"].objective(start) + 1e-12


def _grid_objective(ncvx, L, V):
    """Objective of the exact 1-step problem at voltage rows ``V`` (pu, m x 4),
    with powers from the true flows. Returns (f, feasible mask)."""
    base = ncvx.base
    idx = L.v(0)
    Q = base.Q.toarray()[np.ix_(idx, idx)]
    f = 0.5 * np.einsum("ij,jk,ik->i", V, Q, V)
    ok = np.ones(len(V), dtype=bool)
    for i, qc in enumerate(ncvx.bilinear):
        p_net = -0.5 * np.einsum("ij,jk,ik->i", V, qc.block, V)  # kW
        p_ch, p_dis = np.maximum(-p_net, 0.0), np.maximum(p_net, 0.0)
        f += base.c[L.p_ch(0, i)] * p_ch + base.c[L.p_dis(0, i)] * p_dis
        ok &= (p_ch <= base.ub[L.p_ch(0, i)]) & (p_dis <= base.ub[L.p_dis(0, i)])
    for qc in base.quad:
        pos = np.searchsorted(idx, qc.support)
        ok &= 0.5 * np.einsum("ij,jk,ik->i", V[:, pos], qc.block, V[:, pos]) + qc.s <= 0.0
    for qc in ncvx.lower:
        pos = np.searchsorted(idx, qc.support)
        ok &= 0.5 * np.einsum("ij,jk,ik->i", V[:, pos], qc.block, V[:, pos]) + qc.s >= 0.0
    return f, ok


def test_four_variable_grid_oracle():
    w = _window(_batteries_only(), n_p=1, load_kw=40.0)
    ncvx, L = w["ncvx"], w["L"]
    csol = qcqp.solve(w["convex"])
    loc = solve_local(ncvx, csol.x)
    assert loc.status == "converged"

    lo, hi = np.array([0.0, -0.6, 0.0, -0.6]), np.array([1.1, 0.6, 1.1, 0.6])
    k = 31
    best, best_v, coarse = np.inf, None, None
    for _ in range(4):
        axes = [np.linspace(lo[i], hi[i], k) for i in range(4)]
        V = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 4)
        f, ok = _grid_objective(ncvx, L, V)
        if ok.any():
            i = int(np.argmin(np.where(ok, f, np.inf)))
            if f[i] < best:
                best, best_v = float(f[i]), V[i]
        h = (hi - lo) / (k - 1)
        coarse = h if coarse is None else coarse
        lo, hi = best_v - 2 * h, best_v + 2 * h
    # Lipschitz bound from finite differences over the final neighbourhood, scaled to the coarse cell
    eps = 1e-6
    grad = np.array([(_grid_objective(ncvx, L, (best_v + eps * e)[None])[0][0]
                      - _grid_objective(ncvx, L, (best_v - eps * e)[None])[0][0]) / (2 * eps) for e in np.eye(4)])
    resolution = 2.0 * np.linalg.norm(grad) * np.linalg.norm(coarse)
    v_loc = loc.x[L.v(0)]
    assert abs(loc.objective - best) <= resolution
    # the local optimum is at least as good as any feasible grid point near it
    assert loc.objective <= best + 1e-6
    assert _grid_objective(ncvx, L, v_loc[None])[0][0] == pytest.approx(loc.objective, rel=1e-6)


# ---------------------------------------------------------------- gap


@pytest.mark.parametrize("cvx, ncvx, expected", [(10.0, 10.0, 0.0), (10.0, 9.175, 0.0825), (12.638, 11.596, 0.08245)])
def test_gap_report(cvx, ncvx, expected):
    assert gap_report(cvx, ncvx) == pytest.approx(expected, abs=5e-5)


def test_gap_report_rejects_zero():
    with pytest.raises(ValueError):
        gap_report(0.0, 1.0)
