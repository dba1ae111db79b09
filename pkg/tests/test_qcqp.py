import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from microgrid_mpc.qcqp import NonConvexError, QcqpProblem, QcqpSolution, QuadConstraint, solve, verify_kkt
from microgrid_mpc.qcqp.io import MAGIC, dump, dumps, load, loads

BOX = 2.0


def random_qcqp(seed: int, n: int | None = None) -> QcqpProblem:
    """Strictly feasible convex QCQP on the box [-2, 2]^n: a random interior
    point x0 satisfies every inequality with margin and every equality exactly."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 7))
    x0 = rng.uniform(-1.0, 1.0, n)
    M = rng.normal(size=(n, n))
    Q = M @ M.T * rng.uniform(0.0, 2.0)
    if rng.random() < 0.2:
        Q = np.zeros((n, n))  # linear objective, optimum on the boundary
    c = rng.normal(size=n) * 2.0
    m_eq = int(rng.integers(0, min(2, n - 1) + 1)) if n > 1 else 0
    A = rng.normal(size=(m_eq, n))
    b = A @ x0
    m_lin = int(rng.integers(0, 3))
    G = rng.normal(size=(m_lin, n))
    h = G @ x0 + rng.uniform(0.1, 1.0, m_lin)
    quad = []
    for _ in range(int(rng.integers(0, 3))):
        R = rng.normal(size=(n, n))
        P = R @ R.T
        q = rng.normal(size=n)
        s = -(0.5 * x0 @ P @ x0 + q @ x0) - rng.uniform(0.1, 1.0)
        quad.append((P, q, s))
    lb, ub = np.full(n, -BOX), np.full(n, BOX)
    return QcqpProblem(n, Q, c, 0.0, A if m_eq else None, b if m_eq else None,
                       G if m_lin else None, h if m_lin else None, quad, lb, ub)


def _feasible_mask(p: QcqpProblem, X: np.ndarray, slack: float = 0.0) -> np.ndarray:
    ok = np.all((X >= p.lb - slack) & (X <= p.ub + slack), axis=1)
    if p.G.shape[0]:
        ok &= np.all(X @ p.G.T.toarray() <= p.h + slack, axis=1)
    for qc in p.quad:
        P = qc.matrix().toarray()
        ok &= 0.5 * np.einsum("ij,jk,ik->i", X, P, X) + X @ qc.q + qc.s <= slack
    return ok


def grid_oracle(p: QcqpProblem, points: int = 200_000, levels: int = 6):
    """Brute-force minimum over a zooming tensor grid.

    Equalities are eliminated by gridding the null-space coordinates, so every
    grid point satisfies them exactly. Returns ``(best_objective, resolution)``
    where ``resolution`` is a Lipschitz bound times the diagonal of the first
    grid cell that found a feasible point. The zoom levels only tighten the
    incumbent; they certify nothing finer than that first grid.
    """
    n = p.n
    if p.A.shape[0]:
        A = p.A.toarray()
        x_p = np.linalg.lstsq(A, p.b, rcond=None)[0]
        N = sla.null_space(A)
    else:
        x_p, N = np.zeros(n), np.eye(n)
    d = N.shape[1]
    Qd = p.Q.toarray()
    if d == 0:
        return p.objective(x_p), 0.0
    radius = BOX * np.sqrt(n) + np.linalg.norm(x_p)
    centre, half = np.zeros(d), np.full(d, radius)
    k = max(3, int(points ** (1.0 / d)))
    best, best_z, coarse = np.inf, None, None
    for _ in range(levels):
        axes = [np.linspace(centre[i] - half[i], centre[i] + half[i], k) for i in range(d)]
        spacing = 2 * half / (k - 1)
        Z = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        X = x_p + Z @ N.T
        ok = _feasible_mask(p, X)
        if ok.any():
            f = 0.5 * np.einsum("ij,jk,ik->i", X[ok], Qd, X[ok]) + X[ok] @ p.c + p.r
            i = int(np.argmin(f))
            if f[i] < best:
                best, best_z = float(f[i]), Z[ok][i]
            if coarse is None:
                coarse = spacing
        if best_z is None:
            k += 2  # nothing feasible yet: densify the full box
            continue
        # next level spans two old cells either side of the incumbent
        centre, half = best_z, 2.0 * spacing
    grad_bound = np.abs(Qd).sum(axis=1).max() * (BOX * np.sqrt(n)) + np.abs(p.c).sum()
    return best, float(grad_bound * np.linalg.norm(coarse))


# ---------------------------------------------------------------- examples


def test_active_bound():
    sol = solve(QcqpProblem(1, [[2.0]], [0.0], lb=[1.0]))
    assert sol.status == "optimal"
    assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.lam_lb[0] == pytest.approx(2.0, abs=1e-6)


def test_disc_linear_objective():
    sol = solve(QcqpProblem(2, None, [1.0, 1.0], quad=[(np.eye(2) * 2.0, np.zeros(2), -2.0)]))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [-1.0, -1.0], atol=1e-7)
    assert sol.objective == pytest.approx(-2.0, abs=1e-7)
    assert sol.mu[0] == pytest.approx(0.5, abs=1e-6)


def test_equality_only_qp():
    sol = solve(QcqpProblem(2, np.eye(2), None, A=[[1.0, 1.0]], b=[2.0]))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-9)


def test_zero_quadratic_constraint_acts_linear():
    lin = solve(QcqpProblem(2, np.eye(2), [-3.0, -3.0], G=[[1.0, 1.0]], h=[1.0]))
    quad = solve(QcqpProblem(2, np.eye(2), [-3.0, -3.0], quad=[(np.zeros((2, 2)), [1.0, 1.0], -1.0)]))
    np.testing.assert_allclose(quad.x, lin.x, atol=1e-7)
    np.testing.assert_allclose(quad.x, [0.5, 0.5], atol=1e-7)


def test_non_psd_rejected():
    with pytest.raises(NonConvexError):
        QcqpProblem(2, [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NonConvexError):
        QcqpProblem(2, quad=[([[0.0, 1.0], [1.0, 0.0]], [0.0, 0.0], -1.0)])


def test_dimension_checks():
    with pytest.raises(ValueError):
        QcqpProblem(2, c=[1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        QcqpProblem(2, lb=[1.0, 1.0], ub=[0.0, 2.0])


def test_infeasible_detected():
    # unit disc and x >= 2 do not intersect
    sol = solve(QcqpProblem(2, None, [1.0, 0.0], G=[[-1.0, 0.0]], h=[-2.0],
                            quad=[(2 * np.eye(2), np.zeros(2), -1.0)]))
    assert sol.status == "infeasible"


def test_iteration_cap_reports_max_iter():
    p = random_qcqp(3, n=5)
    sol = solve(p, max_iter=2)
    assert sol.status == "max_iter"
    assert sol.x.shape == (5,) and np.all(np.isfinite(sol.x))


# ---------------------------------------------------------------- verify_kkt


def _hand_solution(x, lam_lb):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.zeros(0)
    return QcqpSolution("optimal", x, z, z, z, np.atleast_1d(lam_lb), np.zeros(1), None, 0, 0.0, 0.0)


def test_verify_kkt_hand_optimum():
    p = QcqpProblem(1, [[2.0]], [0.0], lb=[1.0])
    r = verify_kkt(p, _hand_solution(1.0, 2.0))
    assert r.max() == 0.0


def test_verify_kkt_perturbation():
    p = QcqpProblem(1, [[2.0]], [0.0], lb=[1.0])
    r = verify_kkt(p, _hand_solution(1.0 + 1e-3, 2.0))
    # raw stationarity residual is Q*delta = 2e-3, normalised by 1 + max term (|Qx| = 2.002)
    assert r.stationarity * (1.0 + 2.002) == pytest.approx(2e-3, rel=1e-9)


def test_verify_kkt_infeasible_point():
    p = QcqpProblem(1, None, [1.0], G=[[1.0]], h=[0.0])
    z = np.zeros(0)
    sol = QcqpSolution("optimal", np.array([0.3]), z, np.zeros(1), z, np.zeros(1), np.zeros(1), None, 0, 0.0, 0.0)
    assert verify_kkt(p, sol).primal_feas == pytest.approx(0.3)


def test_verify_kkt_dimension_mismatch():
    p = QcqpProblem(2)
    with pytest.raises(ValueError):
        verify_kkt(p, _hand_solution([1.0, 2.0, 3.0], 0.0))


# ---------------------------------------------------------------- fuzzing


@pytest.fixture(scope="module")
def fuzzed():
    out = []
    for seed in range(120):
        p = random_qcqp(seed)
        out.append((seed, p, solve(p)))
    return out


def test_fuzzed_all_optimal_with_small_kkt(fuzzed):
    for seed, p, sol in fuzzed:
        assert sol.status == "optimal", seed
        assert verify_kkt(p, sol).max() <= 1e-8, seed


def test_fuzzed_duality_gap(fuzzed):
    for seed, p, sol in fuzzed:
        assert abs(sol.gap) <= 10 * 1e-8 * (1 + abs(sol.objective)), seed


def test_fuzzed_against_grid_oracle(fuzzed):
    n_checked = 0
    for seed, p, sol in fuzzed:
        if p.n > 6:
            continue
        best, resolution = grid_oracle(p)
        assert np.isfinite(best), seed
        # never worse than the best feasible grid point, and the grid gets close
        assert sol.objective <= best + 1e-7 * (1 + abs(best)), seed
        assert best <= sol.objective + resolution + 1e-7, seed
        n_checked += 1
    assert n_checked >= 100


def test_fuzzed_beats_random_feasible_points(fuzzed, rng):
    for seed, p, sol in fuzzed[:40]:
        X = rng.uniform(-BOX, BOX, size=(4000, p.n))
        if p.A.shape[0]:
            A = p.A.toarray()
            X = X - (X @ A.T - p.b) @ np.linalg.pinv(A).T  # project onto the affine set
        ok = _feasible_mask(p, X)
        for x in X[ok]:
            assert sol.objective <= p.objective(x) + 1e-8 * (1 + abs(sol.objective))


@pytest.mark.parametrize("alpha", [1e-3, 0.5, 7.0, 1e3])
def test_scaling_invariance(alpha):
    for seed in range(10):
        p = random_qcqp(seed)
        base = solve(p)
        scaled = solve(p.scaled(alpha))
        assert scaled.status == "optimal"
        assert np.abs(scaled.x - base.x).max() <= 1e-6 * (1 + np.abs(base.x).max()), seed


def test_warm_start_does_not_change_answer():
    for seed in range(10):
        p = random_qcqp(seed)
        cold = solve(p)
        warm = solve(p, x0=cold.x + 0.3)
        assert np.abs(cold.x - warm.x).max() <= 1e-6


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_hypothesis_optimality(seed):
    p = random_qcqp(seed)
    sol = solve(p)
    assert sol.status == "optimal"
    assert verify_kkt(p, sol).max() <= 1e-8


# ---------------------------------------------------------------- determinism and io


def test_deterministic_replay():
    p = random_qcqp(17, n=6)
    text = dumps(p)
    a, b = solve(loads(text)), solve(loads(text))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.y.tobytes() == b.y.tobytes() and a.mu.tobytes() == b.mu.tobytes()
    assert a.iterations == b.iterations


@pytest.mark.parametrize("seed", range(6))
def test_io_round_trip(seed, tmp_path):
    p = random_qcqp(seed)
    path = tmp_path / "p.qcqp"
    dump(p, path)
    q = load(path)
    assert path.read_text().startswith(MAGIC)
    assert dumps(q) == dumps(p)
    for a, b in ((p.Q, q.Q), (p.A, q.A), (p.G, q.G)):
        assert (a != b).nnz == 0
    for a, b in ((p.c, q.c), (p.b, q.b), (p.h, q.h), (p.lb, q.lb), (p.ub, q.ub)):
        np.testing.assert_array_equal(a, b)
    assert len(p.quad) == len(q.quad)
    for u, v in zip(p.quad, q.quad):
        np.testing.assert_array_equal(u.matrix().toarray(), v.matrix().toarray())


def test_loads_rejects_bad_header():
    with pytest.raises(ValueError):
        loads("not a problem\n")


def test_quad_constraint_value_and_grad(rng):
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    qc = QuadConstraint(P, [1.0, -1.0], 0.25)
    x = rng.normal(size=2)
    assert qc.value(x) == pytest.approx(0.5 * x @ P @ x + x[0] - x[1] + 0.25)
    np.testing.assert_allclose(qc.grad(x), P @ x + [1.0, -1.0])
