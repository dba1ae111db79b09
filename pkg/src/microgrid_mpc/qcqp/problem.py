"""Convex QCQP data and solution containers, and KKT verification.

    minimise    1/2 x'Qx + c'x + r
    subject to  A x = b
                G x <= h
                1/2 x'P_i x + q_i'x + s_i <= 0
                lb <= x <= ub
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class NonConvexError(ValueError):
    pass


def _as_csr(m, shape) -> sp.csr_matrix:
    if m is None:
        return sp.csr_matrix(shape)
    out = sp.csr_matrix(m, dtype=float)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    return out


@dataclass
class QuadConstraint:
    """``1/2 x'Px + q'x + s <= 0``.

    ``P`` is kept as the dense symmetric block on its support, which is all
    the solver needs; the sparse matrix is rebuilt on demand.
    """

    P: sp.csr_matrix
    q: np.ndarray
    s: float

    def __post_init__(self):
        coo = sp.coo_matrix(self.P, dtype=float)
        n = coo.shape[0]
        if coo.shape != (n, n):
            raise ValueError("P must be square")
        keep = coo.data != 0.0
        r, c, v = coo.row[keep], coo.col[keep], coo.data[keep]
        self.support = np.unique(np.concatenate([r, c]))
        blk = np.zeros((self.support.size, self.support.size))
        np.add.at(blk, (np.searchsorted(self.support, r), np.searchsorted(self.support, c)), v)
        self.block = 0.5 * (blk + blk.T)
        self.n = n
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.s = float(self.s)
        self.P = None

    @classmethod
    def from_block(cls, n: int, support, block, q=None, s: float = 0.0) -> "QuadConstraint":
        obj = cls.__new__(cls)
        obj.n = n
        obj.support = np.asarray(support, dtype=int)
        block = np.asarray(block, dtype=float)
        obj.block = 0.5 * (block + block.T)
        obj.q = np.zeros(n) if q is None else np.asarray(q, dtype=float).ravel()
        obj.s = float(s)
        obj.P = None
        return obj

    def matrix(self) -> sp.csr_matrix:
        ii, jj = np.meshgrid(self.support, self.support, indexing="ij")
        return sp.csr_matrix((self.block.ravel(), (ii.ravel(), jj.ravel())), shape=(self.n, self.n))

    def value(self, x) -> float:
        xs = x[self.support]
        return float(0.5 * xs @ self.block @ xs + self.q @ x + self.s)

    def grad(self, x) -> np.ndarray:
        g = self.q.copy()
        g[self.support] += self.block @ x[self.support]
        return g


def check_psd(M: sp.spmatrix, what: str, rtol: float = 1e-9) -> None:
    """Raise NonConvexError unless ``M`` is symmetric PSD. Works block by block
    over the connected components of the sparsity graph."""
    M = sp.csr_matrix(M)
    if M.nnz == 0:
        return
    asym = abs(M - M.T)
    scale = abs(M).max()
    if asym.nnz and asym.max() > 1e-9 * scale:
        raise NonConvexError(f"{what} is not symmetric")
    support = np.unique(M.nonzero()[0])
    sub = M[support][:, support]
    ncomp, labels = connected_components(sub, directed=False)
    for k in range(ncomp):
        idx = np.flatnonzero(labels == k)
        ev = np.linalg.eigvalsh(sub[idx][:, idx].toarray())
        if ev[0] < -rtol * max(abs(ev[-1]), abs(ev[0]), 1e-300):
            raise NonConvexError(f"{what} is not positive semidefinite (min eigenvalue {ev[0]:.3e})")


def _check_dense_psd(B: np.ndarray, what: str, rtol: float = 1e-9) -> None:
    if B.size == 0:
        return
    ev = np.linalg.eigvalsh(B)
    if ev[0] < -rtol * max(abs(ev[-1]), abs(ev[0]), 1e-300):
        raise NonConvexError(f"{what} is not positive semidefinite (min eigenvalue {ev[0]:.3e})")


@dataclass
class QcqpProblem:
    n: int
    Q: sp.csr_matrix | np.ndarray | None = None
    c: np.ndarray | None = None
    r: float = 0.0
    A: sp.csr_matrix | np.ndarray | None = None
    b: np.ndarray | None = None
    G: sp.csr_matrix | np.ndarray | None = None
    h: np.ndarray | None = None
    quad: list = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    check: bool = True

    def __post_init__(self):
        n = self.n
        self.Q = _as_csr(self.Q, (n, n))
        self.Q = 0.5 * (self.Q + self.Q.T)
        self.c = np.zeros(n) if self.c is None else np.asarray(self.c, dtype=float).ravel()
        mA = 0 if self.A is None else sp.csr_matrix(self.A).shape[0]
        self.A = _as_csr(self.A, (mA, n))
        self.b = np.zeros(mA) if self.b is None else np.asarray(self.b, dtype=float).ravel()
        mG = 0 if self.G is None else sp.csr_matrix(self.G).shape[0]
        self.G = _as_csr(self.G, (mG, n))
        self.h = np.zeros(mG) if self.h is None else np.asarray(self.h, dtype=float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        quads = []
        for qc in self.quad:
            if not isinstance(qc, QuadConstraint):
                P, q, s = qc
                qc = QuadConstraint(_as_csr(P, (n, n)), q, s)
            if qc.n != n:
                raise ValueError("quadratic constraint dimension does not match n")
            quads.append(qc)
        self.quad = quads
        if self.c.shape != (n,) or self.b.shape != (mA,) or self.h.shape != (mG,):
            raise ValueError("vector dimensions do not match the constraint matrices")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must have length n")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub for some variable")
        if self.check:
            check_psd(self.Q, "objective Q")
            for k, qc in enumerate(self.quad):
                if qc.q.shape != (n,):
                    raise ValueError(f"quadratic constraint {k}: q has wrong length")
                _check_dense_psd(qc.block, f"quadratic constraint {k}")

    @property
    def eq_constraints(self):
        return [(self.A.getrow(i).toarray().ravel(), self.b[i]) for i in range(self.A.shape[0])]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.r)

    def scaled(self, alpha: float) -> "QcqpProblem":
        """Same feasible set, objective multiplied by ``alpha``."""
        return QcqpProblem(self.n, self.Q * alpha, self.c * alpha, self.r * alpha, self.A, self.b,
                           self.G, self.h, self.quad, self.lb, self.ub, check=False)


@dataclass
class KktResiduals:
    stationarity: float
    primal_feas: float
    dual_feas: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feas, self.dual_feas, self.complementarity)


@dataclass
class QcqpSolution:
    status: str  # optimal | infeasible | max_iter
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    lam_G: np.ndarray  # linear inequality multipliers
    mu: np.ndarray  # quadratic constraint multipliers
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    kkt: KktResiduals
    iterations: int
    solve_time: float
    objective: float
    gap: float = np.nan


def verify_kkt(problem: QcqpProblem, solution: QcqpSolution) -> KktResiduals:
    """Recompute scale-normalised KKT residuals directly from the problem data."""
    p = problem
    x = np.asarray(solution.x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError("solution dimension does not match the problem")
    y, lam_G, mu = solution.y, solution.lam_G, solution.mu
    lam_lb = np.where(np.isfinite(p.lb), solution.lam_lb, 0.0)
    lam_ub = np.where(np.isfinite(p.ub), solution.lam_ub, 0.0)

    terms = [p.Q @ x, p.c, p.A.T @ y, p.G.T @ lam_G, lam_lb, lam_ub]
    grad = terms[0] + terms[1] + terms[2] + terms[3] - lam_lb + lam_ub
    for m, qc in zip(mu, p.quad):
        t = m * qc.grad(x)
        terms.append(t)
        grad = grad + t
    scale = 1.0 + max(np.max(np.abs(t)) if t.size else 0.0 for t in terms)
    stationarity = float(np.max(np.abs(grad), initial=0.0)) / scale

    viol = [0.0]
    if p.A.shape[0]:
        viol.append(np.max(np.abs(p.A @ x - p.b) / (1.0 + np.abs(p.b))))
    g_lin = p.G @ x - p.h
    if g_lin.size:
        viol.append(np.max(np.maximum(g_lin, 0.0) / (1.0 + np.abs(p.h))))
    g_quad = np.array([qc.value(x) for qc in p.quad])
    if g_quad.size:
        s_abs = np.array([abs(qc.s) for qc in p.quad])
        viol.append(np.max(np.maximum(g_quad, 0.0) / (1.0 + s_abs)))
    fin_lb, fin_ub = np.isfinite(p.lb), np.isfinite(p.ub)
    if fin_lb.any():
        viol.append(np.max(np.maximum(p.lb[fin_lb] - x[fin_lb], 0.0) / (1.0 + np.abs(p.lb[fin_lb]))))
    if fin_ub.any():
        viol.append(np.max(np.maximum(x[fin_ub] - p.ub[fin_ub], 0.0) / (1.0 + np.abs(p.ub[fin_ub]))))
    primal = float(max(viol))

    mults = [lam_G, mu, lam_lb, lam_ub]
    dual = float(max((np.max(np.maximum(-m, 0.0), initial=0.0) for m in mults), default=0.0))

    obj_scale = 1.0 + abs(p.objective(x))
    comp = [0.0]
    if g_lin.size:
        comp.append(np.max(np.abs(lam_G * g_lin)))
    if g_quad.size:
        comp.append(np.max(np.abs(mu * g_quad)))
    if fin_lb.any():
        comp.append(np.max(np.abs(lam_lb[fin_lb] * (x[fin_lb] - p.lb[fin_lb]))))
    if fin_ub.any():
        comp.append(np.max(np.abs(lam_ub[fin_ub] * (p.ub[fin_ub] - x[fin_ub]))))
    complementarity = float(max(comp)) / obj_scale
    return KktResiduals(stationarity, primal, dual, complementarity)
