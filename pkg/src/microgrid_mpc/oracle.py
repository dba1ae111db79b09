"""Local solver for the non-convex dispatch problem and the optimality gap.

The exact problem replaces the linearised VSC power balance by the true
bilinear relation ``P_dis - P_ch = u' i_L`` and the affine d-axis voltage floor
by the magnitude bound ``|v| >= v_lower``. It is solved by sequential convex
programming: both non-convex parts are linearised about the iterate, elastic
l1 slacks keep every subproblem feasible, and a box trust region with a merit
ratio test controls the step. Each subproblem is a convex QCQP handled by the
package solver.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import qcqp
from .mpc import (
    KW,
    Layout,
    MpcConfig,
    MpcContext,
    MpcState,
    Predictions,
    assemble,
    attach_gains,
    linearize_plan,
    nominal_plan,
    unpack,
    update_efficiencies,
    GainCache,
)
from .plant import initial_state, plant_step
from .qcqp import QcqpProblem, QuadConstraint

log = logging.getLogger(__name__)


class TrustRegionWarning(RuntimeWarning):
    pass


@dataclass
class NonconvexProblem:
    """Convex core plus non-convex constraints.

    ``bilinear`` items are equalities ``1/2 x'Px + q'x + s = 0`` with
    indefinite ``P``; ``lower`` items are reverse-convex bounds
    ``1/2 x'Px + q'x + s >= 0`` with PSD ``P``. ``trust_scale`` sets the
    per-variable trust-region width (``inf`` leaves a variable unboxed).
    """

    base: QcqpProblem
    bilinear: list = field(default_factory=list)
    lower: list = field(default_factory=list)
    trust_scale: np.ndarray | None = None

    def __post_init__(self):
        n = self.base.n
        for qc in list(self.bilinear) + list(self.lower):
            if qc.n != n:
                raise ValueError("non-convex constraint dimension does not match the base problem")
        for k, qc in enumerate(self.lower):
            if np.linalg.eigvalsh(qc.block)[0] < -1e-9 * max(1.0, np.abs(qc.block).max()):
                raise ValueError(f"lower bound {k} must have a PSD quadratic part")
        self.trust_scale = np.ones(n) if self.trust_scale is None else np.asarray(self.trust_scale, float)
        if self.trust_scale.shape != (n,) or np.any(self.trust_scale <= 0):
            raise ValueError("trust_scale must be positive with length n")

    @property
    def n(self) -> int:
        return self.base.n

    def objective(self, x) -> float:
        return self.base.objective(x)

    def eq_residuals(self, x) -> np.ndarray:
        return np.array([qc.value(x) for qc in self.bilinear])

    def eq_relative(self, x) -> np.ndarray:
        """Equality residuals divided by the magnitude of their terms."""
        out = []
        for qc in self.bilinear:
            xs = x[qc.support]
            scale = 1.0 + abs(0.5 * xs @ qc.block @ xs) + np.abs(qc.q * x).sum() + abs(qc.s)
            out.append(abs(qc.value(x)) / scale)
        return np.array(out)

    def lower_violation(self, x) -> np.ndarray:
        return np.array([max(0.0, -qc.value(x)) for qc in self.lower])

    def base_violation(self, x) -> float:
        b = self.base
        v = [0.0]
        if b.A.shape[0]:
            v.append(np.abs(b.A @ x - b.b).max())
        if b.G.shape[0]:
            v.append(np.maximum(b.G @ x - b.h, 0.0).max())
        if b.quad:
            v.append(max(qc.value(x) for qc in b.quad))
        v.append(np.maximum(b.lb - x, 0.0).max())
        v.append(np.maximum(x - b.ub, 0.0).max())
        return float(max(v))

    def merit(self, x, penalty: float) -> float:
        return (self.objective(x) + penalty * (np.abs(self.eq_residuals(x)).sum()
                                                + self.lower_violation(x).sum()))


@dataclass
class LocalSolution:
    x: np.ndarray
    objective: float
    status: str  # converged | max_iter | trust_region_collapse
    iterations: int
    eq_residual: float  # max relative bilinear residual
    lower_violation: float
    base_violation: float
    solve_time: float
    history: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.eq_residual <= 1e-6 and self.lower_violation <= 1e-6 and self.base_violation <= 1e-6


def _pad(qc: QuadConstraint, n_tot: int) -> QuadConstraint:
    q = np.zeros(n_tot)
    q[: qc.n] = qc.q
    return QuadConstraint.from_block(n_tot, qc.support, qc.block, q, qc.s)


def _curvature(p: NonconvexProblem, y, lam) -> sp.csr_matrix:
    """Correction ``D`` so that ``Q + D`` is the PSD part of the Lagrangian
    Hessian ``Q + sum y_i P_i - sum lam_j P_j``, projected block by block."""
    n = p.n
    r, c, v = [], [], []
    for w, qc in [(yi, qc) for yi, qc in zip(y, p.bilinear)] + [(-lj, qc) for lj, qc in zip(lam, p.lower)]:
        if w == 0.0:
            continue
        ii, jj = np.meshgrid(qc.support, qc.support, indexing="ij")
        r.append(ii.ravel())
        c.append(jj.ravel())
        v.append(w * qc.block.ravel())
    if not r:
        return sp.csr_matrix((n, n))
    H = sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n))
    support = np.unique(H.nonzero()[0])
    ncomp, labels = connected_components(H[support][:, support], directed=False)
    out_r, out_c, out_v = [], [], []
    for k in range(ncomp):
        idx = support[labels == k]
        q_blk = p.base.Q[idx][:, idx].toarray()
        B = q_blk + H[idx][:, idx].toarray()
        ev, U = np.linalg.eigh(0.5 * (B + B.T))
        B_plus = (U * np.maximum(ev, 0.0)) @ U.T
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        out_r.append(ii.ravel())
        out_c.append(jj.ravel())
        out_v.append((B_plus - q_blk).ravel())
    return sp.csr_matrix((np.concatenate(out_v), (np.concatenate(out_r), np.concatenate(out_c))), shape=(n, n))


def _subproblem(p: NonconvexProblem, x: np.ndarray, delta: float, penalty: float,
                curvature: sp.csr_matrix | None = None, correction=None) -> QcqpProblem:
    """Convex model about ``x``: variables ``[x, e_plus, e_minus, t]``.

    ``correction`` is an optional pair of remainders added to the linearised
    equality and lower-bound values (second-order correction step).
    """
    b = p.base
    n, m, ell = b.n, len(p.bilinear), len(p.lower)
    n_tot = n + 2 * m + ell
    Qx, cx, r0 = b.Q, b.c, b.r
    if curvature is not None and curvature.nnz:
        # 1/2 (z - x)' D (z - x) added to the objective
        Qx = b.Q + curvature
        cx = b.c - curvature @ x
        r0 = b.r + 0.5 * x @ (curvature @ x)
    Q = sp.block_diag([Qx, sp.csr_matrix((n_tot - n, n_tot - n))], format="csr")
    c = np.concatenate([cx, np.full(2 * m + ell, penalty)])

    a_blocks = [sp.hstack([b.A, sp.csr_matrix((b.A.shape[0], n_tot - n))])]
    rhs = [b.b]
    if m:
        J = sp.csr_matrix(np.array([qc.grad(x) for qc in p.bilinear]))
        h = p.eq_residuals(x)
        if correction is not None:
            h = h + correction[0]
        eye = sp.identity(m, format="csr")
        a_blocks.append(sp.hstack([J, -eye, eye, sp.csr_matrix((m, ell))]))
        rhs.append(J @ x - h)
    A = sp.vstack(a_blocks, format="csr")

    g_blocks = [sp.hstack([b.G, sp.csr_matrix((b.G.shape[0], n_tot - n))])]
    h_rhs = [b.h]
    if ell:
        D = sp.csr_matrix(np.array([qc.grad(x) for qc in p.lower]))
        g = np.array([qc.value(x) for qc in p.lower])
        if correction is not None:
            g = g + correction[1]
        g_blocks.append(sp.hstack([-D, sp.csr_matrix((ell, 2 * m)), -sp.identity(ell)]))
        h_rhs.append(g - D @ x)
    G = sp.vstack(g_blocks, format="csr")

    width = delta * p.trust_scale
    lb = np.concatenate([np.maximum(b.lb, x - width), np.zeros(2 * m + ell)])
    ub = np.concatenate([np.minimum(b.ub, x + width), np.full(2 * m + ell, np.inf)])
    quads = [_pad(qc, n_tot) for qc in b.quad]
    return QcqpProblem(n_tot, Q=Q, c=c, r=r0, A=A, b=np.concatenate(rhs), G=G, h=np.concatenate(h_rhs),
                       quad=quads, lb=lb, ub=ub, check=False)


def solve_local(problem: NonconvexProblem, start, *, delta0: float = 0.05, penalty: float = 10.0,
                step_tol: float = 1e-6, feas_tol: float = 1e-6, max_iter: int = 100,
                min_delta: float = 1e-9, sub_tol: float = 1e-8) -> LocalSolution:
    """Sequential convex programming from ``start``.

    Parameters
    ----------
    problem : NonconvexProblem
    start : array_like
        Starting point, typically the convex-formulation solution.
    delta0 : float
        Initial trust-region half-width, in units of ``trust_scale``.
    penalty : float
        Initial l1 penalty on the linearised constraint slacks; it is raised
        tenfold whenever the iteration stalls at an infeasible point.

    Returns
    -------
    LocalSolution
        ``status`` is ``converged`` when a step shorter than ``step_tol`` (or
        a negligible predicted reduction) is accepted at a point meeting
        ``feas_tol``. On trust-region collapse the best feasible iterate seen
        is returned with a warning.
    """
    t0 = time.perf_counter()
    p = problem
    x = np.asarray(start, dtype=float).copy()
    if x.shape != (p.n,):
        raise ValueError("start has the wrong dimension")
    delta, mu = delta0, penalty
    phi = p.merit(x, mu)
    best = None
    history = []

    def feasible(z):
        return (p.eq_relative(z).max(initial=0.0) <= feas_tol
                and p.lower_violation(z).max(initial=0.0) <= feas_tol
                and p.base_violation(z) <= feas_tol)

    def consider(z):
        nonlocal best
        if feasible(z) and (best is None or p.objective(z) < p.objective(best)):
            best = z.copy()

    consider(x)
    status = "max_iter"
    it = 0
    y = np.zeros(len(p.bilinear))
    lam = np.zeros(len(p.lower))
    m_base, g_base = p.base.A.shape[0], p.base.G.shape[0]
    def remainder(x_trial):
        # what the linear models missed at the trial point
        d = x_trial - x
        rh = np.array([qc.value(x_trial) - qc.value(x) - qc.grad(x) @ d for qc in p.bilinear])
        rg = np.array([qc.value(x_trial) - qc.value(x) - qc.grad(x) @ d for qc in p.lower])
        return rh, rg

    for it in range(1, max_iter + 1):
        curv = _curvature(p, y, lam)
        sub = _subproblem(p, x, delta, mu, curv)
        sol = qcqp.solve(sub, tol=sub_tol)
        if sol.status == "infeasible" or not np.all(np.isfinite(sol.x)):
            delta *= 0.25
            history.append({"iter": it, "delta": delta, "accepted": False, "merit": phi})
            if delta < min_delta:
                status = "trust_region_collapse"
                break
            continue
        x_new = sol.x[: p.n]
        model = sol.objective
        pred = phi - model
        phi_new = p.merit(x_new, mu)
        actual = phi - phi_new
        step = float(np.max(np.abs(x_new - x) / p.trust_scale, initial=0.0))
        # below this the model reduction is within the subproblem's accuracy
        noise = 10.0 * sub_tol * (1.0 + abs(phi))
        tiny = pred <= noise
        rho = actual / pred if pred > 0 else (1.0 if actual >= 0 else -1.0)
        accepted = (rho > 0.1 and not tiny) or (tiny and actual >= -noise)
        if not accepted and pred > 0:
            sol2 = qcqp.solve(_subproblem(p, x, delta, mu, curv, remainder(x_new)), tol=sub_tol)
            if sol2.status != "infeasible" and np.all(np.isfinite(sol2.x)):
                x2 = sol2.x[: p.n]
                phi2 = p.merit(x2, mu)
                rho2 = (phi - phi2) / pred
                if rho2 > 0.1:
                    sol, x_new, phi_new, rho, accepted = sol2, x2, phi2, rho2, True
                    step = float(np.max(np.abs(x_new - x) / p.trust_scale, initial=0.0))
        history.append({"iter": it, "delta": delta, "accepted": bool(accepted), "merit": phi_new,
                        "step": step, "rho": rho})
        if accepted:
            x, phi = x_new, phi_new
            y = sol.y[m_base:]
            lam = np.maximum(sol.lam_G[g_base:], 0.0)
            consider(x)
        if accepted and (step <= step_tol or tiny):
            if feasible(x):
                status = "converged"
                break
            # stalled on an infeasible point: make the slacks costlier
            mu *= 10.0
            phi = p.merit(x, mu)
            if mu > 1e8:
                status = "max_iter"
                break
            continue
        if rho < 0.1 and not accepted:
            delta *= 0.25
        elif rho > 0.75 and step >= 0.99 * delta:
            delta *= 2.0
        if delta < min_delta:
            status = "trust_region_collapse"
            break

    if status != "converged":
        warnings.warn(f"local solve ended with {status}; returning the best feasible iterate",
                      TrustRegionWarning, stacklevel=2)
        if best is not None:
            x = best
    return LocalSolution(
        x=x, objective=p.objective(x), status=status, iterations=it,
        eq_residual=float(p.eq_relative(x).max(initial=0.0)),
        lower_violation=float(p.lower_violation(x).max(initial=0.0)),
        base_violation=p.base_violation(x), solve_time=time.perf_counter() - t0, history=history,
    )


# ---------------------------------------------------------------------------
# the microgrid dispatch problem


def exact_dispatch_problem(state: MpcState, pred: Predictions, config: MpcConfig, context: MpcContext,
                           eta_ch, eta_dis, plan0=None):
    """Convex formulation and its exact non-convex counterpart for one window.

    Returns ``(convex_problem, nonconvex_problem, layout, objective_terms)``.
    The convex problem is linearised about ``plan0`` (flat start if None).
    """
    top = context.topology
    nv = top.n_vsc
    plan0 = nominal_plan(state, config, nv) if plan0 is None else plan0
    lins = linearize_plan(pred, plan0, nv)
    convex, L, obj = assemble(state, pred, lins, config, context, eta_ch, eta_dis)
    core, _, _ = assemble(state, pred, lins, config, context, eta_ch, eta_dis, v_lower="none")

    # drop the linearised power rows from the equality block
    n_rows = config.n_p * nv
    A = core.A[n_rows:]
    b = core.b[n_rows:]
    base = QcqpProblem(core.n, Q=core.Q, c=core.c, r=core.r, A=A, b=b, G=core.G, h=core.h,
                       quad=core.quad, lb=core.lb, ub=core.ub, check=False)

    V2 = config.v_ll**2 / KW
    bilinear, lower = [], []
    for k in range(config.n_p):
        models = pred.gains[k][1]
        vk = L.v(k)
        for i in range(nv):
            m = models[i]
            M = 0.5 * (m.g_u.T @ m.g_iL + m.g_iL.T @ m.g_u)
            q = np.zeros(core.n)
            q[L.p_dis(k, i)] = 1.0
            q[L.p_ch(k, i)] = -1.0
            bilinear.append(QuadConstraint.from_block(core.n, vk, -2.0 * V2 * M, q, 0.0))
        for i in range(nv):
            lower.append(QuadConstraint.from_block(core.n, L.v(k, i), 2.0 * np.eye(2), None,
                                                   -config.v_lower_frac**2))
    scale = np.full(core.n, np.inf)
    for k in range(config.n_p):
        scale[L.v(k)] = 1.0
    return convex, NonconvexProblem(base, bilinear, lower, scale), L, obj


def complete_from_voltages(v_plan_pu, state: MpcState, pred: Predictions, config: MpcConfig,
                           context: MpcContext, eta_ch, eta_dis, layout: Layout) -> np.ndarray:
    """Decision vector implied by a voltage plan under the true power flows.

    Powers come from the exact bilinear VSC power, SoC from the recursion and
    the SoC slacks from the bound violations, so the point satisfies every
    equality of the exact problem except any PV or CPL pinning the voltages
    do not honour.
    """
    top = context.topology
    L = layout
    v_plan_pu = np.asarray(v_plan_pu, dtype=float).reshape(L.n_p, -1)
    x = np.zeros(L.n)
    batt = top.vsc_indices("battery")
    soc = np.asarray(state.soc, dtype=float).copy()
    for k in range(L.n_p):
        x[L.v(k)] = v_plan_pu[k]
        models = pred.gains[k][1]
        v = v_plan_pu[k] * config.v_ll
        for i in range(top.n_vsc):
            p = models[i].power(v) / KW
            x[L.p_dis(k, i)] = max(p, 0.0)
            x[L.p_ch(k, i)] = max(-p, 0.0)
        for j, i in enumerate(batt):
            e = context.packs[j].e_max
            soc[j] += (eta_ch[j] * x[L.p_ch(k, i)] - x[L.p_dis(k, i)] / eta_dis[j]) * config.t_s * KW / e
            x[L.soc(k, j)] = soc[j]
            x[L.slack_hi(k, j)] = max(soc[j] - config.soc_max, 0.0)
            x[L.slack_lo(k, j)] = max(config.soc_min - soc[j], 0.0)
    return x


@dataclass
class WindowedResult:
    trajectory: list  # per-step dict rows, plant measurements
    windows: list  # per-window diagnostics
    average_loss_kw: float
    convex_perfect_loss_kw: float | None = None


def run_windowed(data, steps: int, window: int | None = None, *, solve_nonconvex: bool = True,
                 delta0: float = 0.05) -> WindowedResult:
    """Open-loop windowed dispatch with perfect predictions.

    Each window is solved once (convex, then optionally refined by
    ``solve_local``) from the plant SoC at its start; the planned voltages
    are then applied to the plant for the whole window. Windows are chained
    on the true terminal SoC.
    """
    top, cfg = data.topology, data.mpc
    window = window or cfg.n_p
    cfg_w = replace(cfg, n_p=window)
    ctx = MpcContext(top, data.packs, data.eff_poly)
    cache = GainCache(top, cfg.v_ll, cfg.load_quantum)
    plant = initial_state(top, data.packs, cfg.v_ll)
    batt = top.vsc_indices("battery")
    T = data.pv_true.shape[0]
    rows, diag = [], []
    prev_p = None
    for w0 in range(0, steps, window):
        idx = np.minimum(np.arange(w0, w0 + window), T - 1)
        pred = Predictions(p_mpp=data.pv_true[idx], p_cpl=np.zeros((window, 0)), load_p=data.load_true[idx])
        attach_gains(pred, cache)
        state = MpcState(soc=plant.soc.copy(), prev_p_vsc=prev_p)
        eta_ch, eta_dis = update_efficiencies(state, data.eff_poly, cfg_w)
        t0 = time.perf_counter()
        convex, ncvx, L, obj = exact_dispatch_problem(state, pred, cfg_w, ctx, eta_ch, eta_dis)
        sol = qcqp.solve(convex, tol=cfg.tol)
        t_convex = time.perf_counter() - t0
        info = {"window": w0 // window, "start_step": w0, "convex_status": sol.status,
                "convex_objective_kw": sol.objective, "convex_time_s": t_convex}
        x = sol.x
        if solve_nonconvex:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", TrustRegionWarning)
                loc = solve_local(ncvx, sol.x, delta0=delta0)
            x = loc.x
            info.update({"local_status": loc.status, "local_iterations": loc.iterations,
                         "local_objective_kw": loc.objective, "eq_residual": loc.eq_residual,
                         "lower_violation": loc.lower_violation,
                         "window_time_s": time.perf_counter() - t0})
        v_plan, _, _, _, _ = unpack(x, L, cfg_w, top)
        diag.append(info)
        for j in range(min(window, steps - w0)):
            k = w0 + j
            plant, meas = plant_step(plant, top, data.packs, v_plan[j], data.pv_true[k],
                                     data.load_true[k], data.plant)
            rows.append({"step": k, "losses_kw": meas.total_loss / 1e3,
                         "audit_residual": meas.audit_residual,
                         **{f"soc_{n}": float(s) for n, s in zip([top.vscs[i].name for i in batt], meas.soc)}})
            prev_p = meas.p_vsc[batt]
    avg = float(np.mean([r["losses_kw"] for r in rows]))
    return WindowedResult(rows, diag, avg)


def gap_report(loss_convex_kw: float, loss_nonconvex_kw: float) -> float:
    """Relative loss reduction of the non-convex solution over the convex one."""
    if loss_convex_kw == loss_nonconvex_kw:
        return 0.0
    if loss_convex_kw <= 0:
        raise ValueError("convex loss must be positive")
    return (loss_convex_kw - loss_nonconvex_kw) / loss_convex_kw
