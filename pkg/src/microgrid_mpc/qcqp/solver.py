"""Primal-dual interior-point method for convex QCQPs.

Each convex quadratic constraint is lifted to a second-order cone through a
factor ``F`` with ``F'F = P``; the resulting cone QP is solved with
Nesterov-Todd scaling and Mehrotra predictor-corrector steps, following the
structure of CVXOPT's ``coneqp``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import cones
from .cones import ConeSpec, NTScaling
from .problem import KktResiduals, QcqpProblem, QcqpSolution, verify_kkt

log = logging.getLogger(__name__)

MAX_ITER = 200
STEP = 0.99
DENSE_LIMIT = 400
REG = 1e-10


@dataclass
class _SocBlock:
    quad_index: int
    kind: str  # "norm" or "rot"
    t: float  # radius for the norm lift
    offset: int = 0
    dim: int = 0
    F: np.ndarray | None = None


@dataclass
class _Lifted:
    cone: ConeSpec
    G: sp.csr_matrix
    h: np.ndarray
    lb_idx: np.ndarray
    ub_idx: np.ndarray
    n_lin: int
    lin_quad: list  # quad constraints collapsed to linear rows
    socs: list


def _factor(block: np.ndarray) -> np.ndarray:
    """Dense rows ``F`` with ``F'F = block`` from the eigen-decomposition."""
    ev, U = np.linalg.eigh(block)
    keep = ev > 1e-12 * max(ev[-1], 0.0)
    return np.sqrt(ev[keep])[:, None] * U[:, keep].T


def _lift(p: QcqpProblem) -> _Lifted:
    n = p.n
    lb_idx = np.flatnonzero(np.isfinite(p.lb))
    ub_idx = np.flatnonzero(np.isfinite(p.ub))
    lin_quad = [k for k, qc in enumerate(p.quad) if qc.support.size == 0 or not np.any(qc.block)]
    lin_set = set(lin_quad)
    blocks_G = [
        sp.csr_matrix((-np.ones(lb_idx.size), (np.arange(lb_idx.size), lb_idx)), shape=(lb_idx.size, n)),
        sp.csr_matrix((np.ones(ub_idx.size), (np.arange(ub_idx.size), ub_idx)), shape=(ub_idx.size, n)),
        p.G,
    ]
    blocks_h = [-p.lb[lb_idx], p.ub[ub_idx], p.h]
    if lin_quad:
        blocks_G.append(sp.csr_matrix(np.array([p.quad[k].q for k in lin_quad])))
        blocks_h.append(np.array([-p.quad[k].s for k in lin_quad]))
    n_lin = sum(bl.shape[0] for bl in blocks_G)

    # second-order cone rows, assembled as triplets
    pending = []
    for k, qc in enumerate(p.quad):
        if k in lin_set:
            continue
        F = _factor(qc.block)
        kind = "norm" if not np.any(qc.q) and qc.s < 0 else "rot"
        pending.append((F.shape[0] + (1 if kind == "norm" else 2), k, kind, F))
    pending.sort(key=lambda e: e[0])  # stable, so equal sizes keep their order
    rows, cols, vals, h_soc, socs = [], [], [], [], []
    offset = n_lin
    for dim, k, kind, F in pending:
        qc = p.quad[k]
        sup = qc.support
        r = F.shape[0]
        head = 1 if kind == "norm" else 2
        if kind == "norm":
            t = float(np.sqrt(-2.0 * qc.s))
            h_soc.append(np.concatenate([[t], np.zeros(r)]))
            socs.append(_SocBlock(k, "norm", t, offset - n_lin, dim, F))
        else:
            # ||Fx||^2 <= 2a with a = -q'x - s  <=>  ||(a - 1/2, Fx)|| <= a + 1/2
            nzq = np.flatnonzero(qc.q)
            for row in (0, 1):
                rows.append(np.full(nzq.size, offset - n_lin + row))
                cols.append(nzq)
                vals.append(qc.q[nzq])
            h_soc.append(np.concatenate([[0.5 - qc.s, -0.5 - qc.s], np.zeros(r)]))
            socs.append(_SocBlock(k, "rot", 0.0, offset - n_lin, dim, F))
        rr = offset - n_lin + head + np.repeat(np.arange(r), sup.size)
        rows.append(rr)
        cols.append(np.tile(sup, r))
        vals.append(-F.ravel())
        offset += dim
    m_soc = offset - n_lin
    for blk in socs:
        blk.offset += n_lin
    if m_soc:
        blocks_G.append(sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m_soc, n)))
        blocks_h.append(np.concatenate(h_soc))
    G = sp.vstack(blocks_G, format="csr")
    h = np.concatenate(blocks_h)
    cone = ConeSpec(l=n_lin, soc_dims=[e[0] for e in pending])
    return _Lifted(cone, G, h, lb_idx, ub_idx, n_lin, lin_quad, socs)


class _KktSystem:
    """Factorised reduced KKT matrix ``[[Q + G'W^-2 G, A'], [A, 0]]``."""

    def __init__(self, Q, A, G, Winv: sp.spmatrix):
        n, p = Q.shape[0], A.shape[0]
        Gs = Winv @ G
        H = (Q + Gs.T @ Gs).tocsr()
        self.n, self.p = n, p
        self.K = sp.bmat([[H, A.T], [A, None]], format="csc")
        # near the boundary W^-2 reaches 1e17 and a fixed shift is lost to rounding
        # on those pivots; scale each shift to its own pivot (~1e-16 relative) and
        # leave well-scaled rows alone (refinement works against K itself)
        delta = REG * np.maximum(1.0, np.abs(H.diagonal()) * 1e-6)
        reg = sp.diags(np.concatenate([delta, np.full(p, -REG)]))
        Kr = (self.K + reg).tocsc()
        self.dense = n + p <= DENSE_LIMIT
        if self.dense:
            self._lu = sla.lu_factor(Kr.toarray(), check_finite=False)
        else:
            self._lu = spla.splu(Kr, permc_spec="MMD_AT_PLUS_A")

    def _raw(self, rhs):
        if self.dense:
            return sla.lu_solve(self._lu, rhs, check_finite=False)
        return self._lu.solve(rhs)

    def solve(self, rhs, refine: int = 3):
        sol = self._raw(rhs)
        for _ in range(refine):
            res = rhs - self.K @ sol
            if np.max(np.abs(res)) <= 1e-14 * (1.0 + np.max(np.abs(rhs))):
                break
            sol = sol + self._raw(res)
        return sol


def _newton(kkt, W: NTScaling, G, bx, by, bz):
    """Solve  Q dx + A'dy + G'dz = bx,  A dx = by,  G dx - W^2 dz = bz."""
    w2bz = W.apply(W.apply(bz, inverse=True), inverse=True)
    sol = kkt.solve(np.concatenate([bx + G.T @ w2bz, by]))
    dx, dy = sol[: kkt.n], sol[kkt.n :]
    dz = W.apply(W.apply(G @ dx - bz, inverse=True), inverse=True)
    return dx, dy, dz


def _unlift_duals(p: QcqpProblem, L: _Lifted, x, y, z):
    nlb, nub, nG = L.lb_idx.size, L.ub_idx.size, p.G.shape[0]
    lam_lb = np.zeros(p.n)
    lam_ub = np.zeros(p.n)
    lam_lb[L.lb_idx] = z[:nlb]
    lam_ub[L.ub_idx] = z[nlb : nlb + nub]
    lam_G = z[nlb + nub : nlb + nub + nG].copy()
    mu = np.zeros(len(p.quad))
    for j, k in enumerate(L.lin_quad):
        mu[k] = z[nlb + nub + nG + j]
    for blk in L.socs:
        # project the cone block's gradient contribution onto the constraint gradient
        qc = p.quad[blk.quad_index]
        zb = z[blk.offset : blk.offset + blk.dim]
        head = 1 if blk.kind == "norm" else 2
        contrib = np.zeros(p.n) if blk.kind == "norm" else qc.q * (zb[0] + zb[1])
        contrib[qc.support] -= blk.F.T @ zb[head:]
        g = qc.grad(x)
        gg = float(g @ g)
        if gg > 0:
            mu[blk.quad_index] = max(float(contrib @ g) / gg, 0.0)
        else:
            z0 = z[blk.offset]
            mu[blk.quad_index] = z0 / blk.t if blk.kind == "norm" else z0 + z[blk.offset + 1]
    return y.copy(), lam_G, mu, lam_lb, lam_ub


def solve(problem: QcqpProblem, tol: float = 1e-8, max_iter: int = MAX_ITER, x0=None) -> QcqpSolution:
    """Solve a convex QCQP to KKT tolerance ``tol``.

    ``x0`` is an optional primal warm start; it only seeds the iterate.
    Returns status "optimal", "infeasible" (approximate Farkas certificate
    found) or "max_iter" (best iterate returned).

    Objectives whose data is small (largest entry of ``Q`` and ``c`` below 1)
    are rescaled to unit size first. Otherwise the ``1 + |f|`` normalisation of
    the stopping test would let small objectives stop early, and the argmin
    would depend on the objective's units.
    """
    t_start = time.perf_counter()
    kappa = max(abs(problem.Q).max() if problem.Q.nnz else 0.0, np.max(np.abs(problem.c), initial=0.0))
    if not 0.0 < kappa < 1.0:
        return _solve_ipm(problem, tol, max_iter, x0, t_start)
    sol = _solve_ipm(problem.scaled(1.0 / kappa), tol, max_iter, x0, t_start)
    for name in ("y", "lam_G", "mu", "lam_lb", "lam_ub"):
        setattr(sol, name, getattr(sol, name) * kappa)
    sol.objective = problem.objective(sol.x)
    sol.gap *= kappa
    sol.kkt = verify_kkt(problem, sol)
    sol.solve_time = time.perf_counter() - t_start
    return sol


def _solve_ipm(problem: QcqpProblem, tol, max_iter, x0, t_start) -> QcqpSolution:
    p = problem
    L = _lift(p)
    cone, G, h = L.cone, L.G, L.h
    Q, A, b, c = p.Q, p.A, p.b, p.c
    n, m = p.n, cone.size
    e = cone.identity()

    # initial point from the KKT system with W = I
    if m == 0:
        return _solve_equality_qp(p, t_start)
    ident = NTScaling(cone, e.copy(), e.copy())
    kkt = _KktSystem(Q, A, G, sp.identity(m, format="csr"))
    x, y, zt = _newton(kkt, ident, G, -c, b, h)
    if x0 is not None:
        x = np.asarray(x0, dtype=float).copy()
    s = cones.shift_interior(cone, h - G @ x)
    z = cones.shift_interior(cone, zt)

    nb = max(1.0, np.linalg.norm(b))
    nh = max(1.0, np.linalg.norm(h))
    nc = max(1.0, np.linalg.norm(c))
    best = None
    status = "max_iter"
    it = 0
    for it in range(max_iter + 1):
        Qx = Q @ x
        rx = Qx + c + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        pcost = float(0.5 * x @ Qx + c @ x)
        dcost = pcost + float(y @ ry) + float(z @ rz) - gap
        pres = max(np.linalg.norm(ry) / nb, np.linalg.norm(rz) / nh)
        dres = np.linalg.norm(rx) / nc
        merit = max(pres, dres, gap / (1.0 + abs(pcost)))
        log.debug("it %d pcost %.9e dcost %.9e gap %.2e pres %.2e dres %.2e", it, pcost, dcost, gap, pres, dres)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy(), s.copy(), gap)

        if pres <= tol and dres <= tol and gap <= tol * (1.0 + abs(pcost)):
            sol = _make_solution(p, L, x, y, z, "optimal", it, t_start, gap)
            if sol.kkt.max() > tol:
                sol = _polish(p, sol)
            if sol.kkt.max() <= tol:
                sol.solve_time = time.perf_counter() - t_start
                return sol

        if it >= 5 and _farkas(A, G, b, h, y, z, tol):
            return _make_solution(p, L, x, y, z, "infeasible", it, t_start, gap)
        if it == max_iter:
            break

        W = NTScaling(cone, s, z)
        lam = W.apply(z)
        try:
            kkt = _KktSystem(Q, A, G, W.inverse_matrix())
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("KKT factorisation failed at iteration %d: %s", it, exc)
            break

        # predictor
        u = -lam
        dx, dy, dz = _newton(kkt, W, G, -rx, -ry, -rz - W.apply(u))
        ds = W.apply(u - W.apply(dz))
        a_aff = min(1.0, cones.max_step(cone, s, ds), cones.max_step(cone, z, dz))
        mu = gap / cone.degree
        sigma = float(np.clip((s + a_aff * ds) @ (z + a_aff * dz) / gap, 0.0, 1.0)) ** 3 if gap > 0 else 0.0

        # corrector
        ds_t = u - W.apply(dz)  # W^-1 ds
        dz_t = W.apply(dz)
        dc = -cones.product(cone, lam, lam) - cones.product(cone, ds_t, dz_t) + sigma * mu * e
        u = cones.inv_product(cone, lam, dc)
        dx, dy, dz = _newton(kkt, W, G, -rx, -ry, -rz - W.apply(u))
        ds = W.apply(u - W.apply(dz))
        alpha = min(1.0, STEP * cones.max_step(cone, s, ds), STEP * cones.max_step(cone, z, dz))
        if not np.isfinite(alpha) or alpha <= 1e-12:
            log.debug("step length collapsed at iteration %d", it)
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if not (cones.min_eig(cone, s) > 0 and cones.min_eig(cone, z) > 0):
            log.debug("iterate left the cone at iteration %d", it)
            break

    _, x, y, z, s, gap = best
    sol = _make_solution(p, L, x, y, z, status, it, t_start, gap)
    if best[0] <= 1e-5:
        sol = _polish(p, sol)
        if sol.kkt.max() <= tol:
            sol.status = "optimal"
    sol.solve_time = time.perf_counter() - t_start
    return sol


def _polish(p: QcqpProblem, sol: QcqpSolution, steps: int = 6) -> QcqpSolution:
    """Newton refinement of the KKT equations on the guessed active set.

    Interior iterates approach the cone boundary only at the square root of
    the duality gap, which limits the accuracy of the recovered quadratic
    multipliers. Fixing the active set and solving the KKT equations directly
    recovers full precision; the result is kept only if it improves the
    residuals.
    """
    n = p.n
    x = sol.x.copy()
    # inequality rows: G, lower bounds, upper bounds (all as row x <= h)
    fin_lb, fin_ub = np.flatnonzero(np.isfinite(p.lb)), np.flatnonzero(np.isfinite(p.ub))
    rows = sp.vstack([
        p.G,
        sp.csr_matrix((-np.ones(fin_lb.size), (np.arange(fin_lb.size), fin_lb)), shape=(fin_lb.size, n)),
        sp.csr_matrix((np.ones(fin_ub.size), (np.arange(fin_ub.size), fin_ub)), shape=(fin_ub.size, n)),
    ], format="csr")
    rhs = np.concatenate([p.h, -p.lb[fin_lb], p.ub[fin_ub]])
    lam = np.concatenate([sol.lam_G, sol.lam_lb[fin_lb], sol.lam_ub[fin_ub]])
    act_l = np.flatnonzero(lam > np.abs(rhs - rows @ x))
    gq = np.array([qc.value(x) for qc in p.quad])
    act_q = np.flatnonzero(sol.mu > np.abs(gq)) if gq.size else np.zeros(0, dtype=int)
    La = rows[act_l]
    ha = rhs[act_l]
    y, lam_a, mu_a = sol.y.copy(), lam[act_l].copy(), sol.mu[act_q].copy()
    m_eq, nl, nq = p.A.shape[0], act_l.size, act_q.size

    best = sol
    for _ in range(steps):
        hr, hc, hv, grads = [], [], [], []
        for i, k in enumerate(act_q):
            qc = p.quad[k]
            ii, jj = np.meshgrid(qc.support, qc.support, indexing="ij")
            hr.append(ii.ravel())
            hc.append(jj.ravel())
            hv.append(mu_a[i] * qc.block.ravel())
            grads.append(qc.grad(x))
        Hx = p.Q
        if hr:
            Hx = Hx + sp.csr_matrix((np.concatenate(hv), (np.concatenate(hr), np.concatenate(hc))), shape=(n, n))
        Jq = sp.csr_matrix(np.array(grads).reshape(nq, n))
        r_stat = p.Q @ x + p.c + p.A.T @ y + La.T @ lam_a + (Jq.T @ mu_a if nq else 0.0)
        r = np.concatenate([
            r_stat, p.A @ x - p.b, np.array([p.quad[k].value(x) for k in act_q]), La @ x - ha,
        ])
        K = sp.bmat([[Hx, p.A.T, Jq.T, La.T], [p.A, None, None, None],
                     [Jq, None, None, None], [La, None, None, None]], format="csc")
        try:
            if K.shape[0] <= DENSE_LIMIT:
                d = np.linalg.lstsq(K.toarray(), -r, rcond=None)[0]
            else:
                reg = sp.diags(np.concatenate([np.full(n, REG), np.full(K.shape[0] - n, -REG)]))
                lu = spla.splu((K + reg).tocsc(), permc_spec="MMD_AT_PLUS_A")
                d = lu.solve(-r)
                for _ in range(3):
                    d = d + lu.solve(-r - K @ d)
        except (RuntimeError, np.linalg.LinAlgError):
            break
        if not np.all(np.isfinite(d)):
            break
        x = x + d[:n]
        y = y + d[n : n + m_eq]
        mu_a = mu_a + d[n + m_eq : n + m_eq + nq]
        lam_a = lam_a + d[n + m_eq + nq :]

        lam_full = np.zeros(rows.shape[0])
        lam_full[act_l] = lam_a
        mu_full = np.zeros(len(p.quad))
        mu_full[act_q] = mu_a
        nG = p.G.shape[0]
        lam_lb = np.zeros(n)
        lam_ub = np.zeros(n)
        lam_lb[fin_lb] = lam_full[nG : nG + fin_lb.size]
        lam_ub[fin_ub] = lam_full[nG + fin_lb.size :]
        cand = QcqpSolution(sol.status, x.copy(), y.copy(), lam_full[:nG].copy(), mu_full, lam_lb, lam_ub,
                            sol.kkt, sol.iterations, sol.solve_time, p.objective(x), sol.gap)
        cand.kkt = verify_kkt(p, cand)
        if cand.kkt.max() < best.kkt.max():
            best = cand
        if np.max(np.abs(d)) <= 1e-15 * (1.0 + np.max(np.abs(x))):
            break
    best.solve_time = sol.solve_time
    return best


def _farkas(A, G, b, h, y, z, tol) -> bool:
    t = -(b @ y + h @ z)
    if t <= 0:
        return False
    scale = max(np.max(np.abs(z)), np.max(np.abs(y), initial=0.0))
    if scale < 1e6:
        return False
    res = np.max(np.abs(A.T @ y + G.T @ z)) / t
    return res <= 1e-6


def _make_solution(p, L, x, y, z, status, it, t_start, gap) -> QcqpSolution:
    yy, lam_G, mu, lam_lb, lam_ub = _unlift_duals(p, L, x, y, z)
    sol = QcqpSolution(
        status=status, x=x.copy(), y=yy, lam_G=lam_G, mu=mu, lam_lb=lam_lb, lam_ub=lam_ub,
        kkt=KktResiduals(np.nan, np.nan, np.nan, np.nan), iterations=it,
        solve_time=time.perf_counter() - t_start, objective=p.objective(x), gap=gap,
    )
    sol.kkt = verify_kkt(p, sol)
    return sol


def _solve_equality_qp(p: QcqpProblem, t_start) -> QcqpSolution:
    n, m = p.n, p.A.shape[0]
    K = sp.bmat([[p.Q, p.A.T], [p.A, None]], format="csc")
    rhs = np.concatenate([-p.c, p.b])
    sol, *_ = np.linalg.lstsq(K.toarray(), rhs, rcond=None)
    x, y = sol[:n], sol[n:]
    out = QcqpSolution("optimal", x, y, np.zeros(0), np.zeros(0), np.zeros(n), np.zeros(n),
                       KktResiduals(np.nan, np.nan, np.nan, np.nan), 0,
                       time.perf_counter() - t_start, p.objective(x), 0.0)
    out.kkt = verify_kkt(p, out)
    if out.kkt.primal_feas > 1e-8:
        out.status = "infeasible"
    return out
