"""Convex receding-horizon dispatch of the VSC output voltages.

The optimisation is posed in scaled units so the interior-point solver sees
well conditioned data: voltages in per unit of ``v_ll``, powers in kW, SoC as
a fraction and the objective in kW summed over the horizon.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import qcqp
from .battery import BatteryPack, EffPoly, eval_eff
from .netmodel import NetworkTopology, StaticGains, loss_quadratic_forms, resistive_load_gains
from .vsc import VscStaticModel, all_vsc_models, linearize_power

log = logging.getLogger(__name__)

KW = 1e3


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class MpcConfig:
    t_s: float = 60.0
    n_p: int = 30
    v_ll: float = 415.0
    v_upper_frac: float = 1.1
    v_lower_frac: float = 0.9
    i_ph_max: float = 150.0
    soc_min: float = 0.2
    soc_max: float = 1.0
    soc_slack_penalty: float = 1e6  # W per unit SoC slack
    mode: str = "variable_eff"  # or "constant_eff"
    eta_const: tuple[float, float] = (0.9981, 0.9980)
    eff_margin: float = 1e-4  # keeps 1 - eta_ch and 1/eta_dis - 1 strictly positive
    tol: float = 1e-8
    load_quantum: float = 1.0  # W, resolution of the gain cache key

    def __post_init__(self):
        if not 0 < self.v_lower_frac < self.v_upper_frac:
            raise ValueError("need 0 < v_lower_frac < v_upper_frac")
        if self.n_p < 1 or self.t_s <= 0:
            raise ValueError("n_p must be >= 1 and t_s > 0")
        if self.mode not in ("variable_eff", "constant_eff"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def i_dq_max(self) -> float:
        """Bound on the d-q inductor current magnitude (sqrt(3) x phase RMS)."""
        return math.sqrt(3.0) * self.i_ph_max


@dataclass
class MpcContext:
    """Static data the controller needs beyond its config."""

    topology: NetworkTopology
    packs: list[BatteryPack]  # one per battery VSC, in VSC order
    eff_poly: EffPoly

    def __post_init__(self):
        nb = len(self.topology.vsc_indices("battery"))
        if len(self.packs) != nb:
            raise ValueError(f"{nb} battery VSCs but {len(self.packs)} packs")


@dataclass
class MpcState:
    soc: np.ndarray  # per battery
    prev_plan: np.ndarray | None = None  # n_p x 2N, physical volts
    prev_p_vsc: np.ndarray | None = None  # per VSC, W, measured last interval
    eta_ch: np.ndarray | None = None
    eta_dis: np.ndarray | None = None
    last_reference: np.ndarray | None = None  # 2N volts

    def __post_init__(self):
        self.soc = np.asarray(self.soc, dtype=float)
        if np.any(self.soc < 0) or np.any(self.soc > 1):
            raise ValueError("SoC estimates must lie in [0, 1]")


@dataclass
class Predictions:
    p_mpp: np.ndarray  # n_p x n_pv, W
    p_cpl: np.ndarray  # n_p x n_cpl, W
    load_p: np.ndarray  # n_p x n_loads, W at rated voltage
    gains: list | None = None  # per-step StaticGains, filled by attach_gains

    def __post_init__(self):
        self.p_mpp = np.atleast_2d(np.asarray(self.p_mpp, dtype=float))
        self.p_cpl = np.atleast_2d(np.asarray(self.p_cpl, dtype=float))
        self.load_p = np.atleast_2d(np.asarray(self.load_p, dtype=float))
        for name in ("p_mpp", "p_cpl", "load_p"):
            if np.any(getattr(self, name) < 0):
                raise PredictionError(f"{name} must be non-negative")

    @property
    def horizon(self) -> int:
        return self.load_p.shape[0]


@dataclass
class MpcDecision:
    v_ref: np.ndarray  # 2N, volts, dispatched now
    v_plan: np.ndarray  # n_p x 2N volts
    p_ch: np.ndarray  # n_p x N, W
    p_dis: np.ndarray  # n_p x N, W
    soc_pred: np.ndarray  # (n_p + 1) x n_batt
    objective: float  # W summed over the horizon, slack penalty excluded
    eta_ch: np.ndarray
    eta_dis: np.ndarray
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# gains


class GainCache:
    """Horizon gains keyed on the quantised load vector."""

    def __init__(self, topology: NetworkTopology, v_ll: float, quantum: float = 1.0, size: int = 256):
        self.topology = topology
        self.v_ll = v_ll
        self.quantum = quantum

        @lru_cache(maxsize=size)
        def _get(key):
            p = np.asarray(key, dtype=float) * self.quantum
            gains = resistive_load_gains(self.topology, p, self.v_ll)
            return gains, all_vsc_models(gains, self.topology), loss_quadratic_forms(gains, self.topology)

        self._get = _get

    def __call__(self, load_p):
        key = tuple(int(round(x / self.quantum)) for x in np.asarray(load_p, dtype=float))
        return self._get(key)


def attach_gains(pred: Predictions, cache: GainCache) -> Predictions:
    pred.gains = [cache(row) for row in pred.load_p]
    return pred


# ---------------------------------------------------------------------------
# variable layout


class Layout:
    """Index map of the stacked decision vector.

    Per horizon step: ``v`` (2N, pu), ``p_ch`` and ``p_dis`` (N each, kW),
    next-step SoC per battery, then lower and upper SoC slacks.
    """

    def __init__(self, n_vsc: int, n_batt: int, n_p: int):
        self.n_vsc, self.n_batt, self.n_p = n_vsc, n_batt, n_p
        self.block = 4 * n_vsc + 3 * n_batt
        self.n = self.block * n_p

    @property
    def core_variables(self) -> int:
        return 4 * self.n_vsc * self.n_p

    def v(self, k, i=None):
        base = k * self.block
        if i is None:
            return np.arange(base, base + 2 * self.n_vsc)
        return np.array([base + 2 * i, base + 2 * i + 1])

    def p_ch(self, k, i):
        return k * self.block + 2 * self.n_vsc + i

    def p_dis(self, k, i):
        return k * self.block + 3 * self.n_vsc + i

    def soc(self, k, j):
        """SoC at the end of step ``k``."""
        return k * self.block + 4 * self.n_vsc + j

    def slack_lo(self, k, j):
        return k * self.block + 4 * self.n_vsc + self.n_batt + j

    def slack_hi(self, k, j):
        return k * self.block + 4 * self.n_vsc + 2 * self.n_batt + j


# ---------------------------------------------------------------------------
# efficiencies


def update_efficiencies(state: MpcState, poly: EffPoly, config: MpcConfig | None = None):
    """Per-battery ``(eta_ch, eta_dis)`` from the SoC estimate and the previous
    interval's measured power magnitude (zero at cold start).

    The surrogate can exceed unity at low power; the result is limited so the
    loss coefficients ``1 - eta_ch`` and ``1/eta_dis - 1`` stay at least
    ``eff_margin``, otherwise simultaneous charge and discharge could lower
    the objective.
    """
    config = config or MpcConfig()
    n = state.soc.size
    if config.mode == "constant_eff":
        return np.full(n, config.eta_const[0]), np.full(n, config.eta_const[1])
    p_prev = np.zeros(n) if state.prev_p_vsc is None else np.abs(np.asarray(state.prev_p_vsc, dtype=float))
    if p_prev.size != n:
        raise ValueError("prev_p_vsc must hold one value per battery")
    lo, hi = poly.soc_range
    eta_ch = np.empty(n)
    eta_dis = np.empty(n)
    for j in range(n):
        soc = min(max(state.soc[j], lo), hi)
        p = min(p_prev[j], poly.p_range[1])
        eta_ch[j] = min(eval_eff(poly, soc, p, "charge"), 1.0 - config.eff_margin)
        inv = max(eval_eff(poly, soc, p, "discharge"), 1.0 + config.eff_margin)
        eta_dis[j] = 1.0 / inv
    return eta_ch, eta_dis


# ---------------------------------------------------------------------------
# objective


@dataclass
class ObjectiveTerms:
    """Physical objective: sum_k v_k' Qv_k v_k (W, v in volts) plus
    ``c_ch . P_ch + c_dis . P_dis`` (dimensionless, P in W)."""

    q_v: list  # per step, 2N x 2N
    c_ch: np.ndarray  # per battery
    c_dis: np.ndarray

    def value(self, v_plan, p_ch, p_dis) -> float:
        tot = sum(float(v @ q @ v) for v, q in zip(v_plan, self.q_v))
        return tot + float(np.sum(p_ch @ self.c_ch) + np.sum(p_dis @ self.c_dis))


def build_objective(gains_per_step, eta_ch, eta_dis, topology: NetworkTopology) -> ObjectiveTerms:
    """Network (filter plus line) I^2R loss forms per step and battery loss
    coefficients. ``gains_per_step`` items are StaticGains or cache tuples."""
    q_v = []
    for g in gains_per_step:
        q_lcl, q_line = g[2] if isinstance(g, tuple) else loss_quadratic_forms(g, topology)
        q_v.append(q_lcl + q_line)
    eta_ch = np.asarray(eta_ch, dtype=float)
    eta_dis = np.asarray(eta_dis, dtype=float)
    return ObjectiveTerms(q_v=q_v, c_ch=1.0 - eta_ch, c_dis=1.0 / eta_dis - 1.0)


# ---------------------------------------------------------------------------
# constraints


@dataclass
class ConstraintSet:
    """Constraints in scaled variables, ready for ``QcqpProblem``."""

    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    quad: list
    lb: np.ndarray
    ub: np.ndarray
    labels: dict  # name -> row ranges, for diagnostics


def _models(g):
    return g[1] if isinstance(g, tuple) else None


def build_constraints(state: MpcState, pred: Predictions, linearizations, config: MpcConfig,
                      context: MpcContext, eta_ch, eta_dis, layout: Layout,
                      v_lower: str = "affine") -> ConstraintSet:
    """Assemble every constraint of the convex problem.

    ``linearizations[k][i]`` is the PowerLinearization of VSC ``i`` at step ``k``.
    ``v_lower="affine"`` applies the d-axis floor; any other value omits it
    so callers can add their own lower bound.
    """
    top = context.topology
    nv, nb, n_p = top.n_vsc, len(top.vsc_indices("battery")), config.n_p
    if pred.horizon < n_p or pred.gains is None or len(pred.gains) < n_p:
        raise PredictionError(f"predictions must cover {n_p} steps with gains attached")
    batt = top.vsc_indices("battery")
    pv = top.vsc_indices("pv")
    cpl = top.vsc_indices("cpl")
    if pred.p_mpp.shape[1] < len(pv) or (cpl and pred.p_cpl.shape[1] < len(cpl)):
        raise PredictionError("missing PV or CPL predictions")
    V = config.v_ll
    L = layout
    n = L.n
    rows, cols, vals, rhs = [], [], [], []
    labels = {}

    def eq(coefs: dict, value: float):
        r = len(rhs)
        for c, a in coefs.items():
            rows.append(r)
            cols.append(c)
            vals.append(a)
        rhs.append(value)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)

    # linearised power balance:  P_dis - P_ch = coeff.v + offset   (kW, v pu)
    start = 0
    for k in range(n_p):
        for i in range(nv):
            lin = linearizations[k][i]
            coefs = {c: -lin.coeff[j] * V / KW for j, c in enumerate(L.v(k))}
            coefs[L.p_dis(k, i)] = coefs.get(L.p_dis(k, i), 0.0) + 1.0
            coefs[L.p_ch(k, i)] = -1.0
            eq(coefs, lin.offset / KW)
    labels["power"] = (start, len(rhs))

    # PV and CPL pinning
    start = len(rhs)
    for k in range(n_p):
        for m, i in enumerate(pv):
            eq({L.p_dis(k, i): 1.0}, pred.p_mpp[k, m] / KW)
            eq({L.p_ch(k, i): 1.0}, 0.0)
        for m, i in enumerate(cpl):
            eq({L.p_dis(k, i): 1.0}, 0.0)
            eq({L.p_ch(k, i): 1.0}, pred.p_cpl[k, m] / KW)
    labels["pinning"] = (start, len(rhs))

    # SoC recursion
    start = len(rhs)
    for j, i in enumerate(batt):
        e = context.packs[j].e_max
        a_ch = eta_ch[j] * config.t_s * KW / e
        a_dis = config.t_s * KW / (eta_dis[j] * e)
        for k in range(n_p):
            coefs = {L.soc(k, j): 1.0, L.p_ch(k, i): -a_ch, L.p_dis(k, i): a_dis}
            if k == 0:
                eq(coefs, float(state.soc[j]))
            else:
                coefs[L.soc(k - 1, j)] = -1.0
                eq(coefs, 0.0)
    labels["soc"] = (start, len(rhs))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), n))
    b = np.asarray(rhs, dtype=float)

    # SoC bounds with slack: soc - s_hi <= soc_max,  -soc - s_lo <= -soc_min
    g_rows, g_cols, g_vals, h = [], [], [], []
    for k in range(n_p):
        for j in range(nb):
            r = len(h)
            g_rows += [r, r, r + 1, r + 1]
            g_cols += [L.soc(k, j), L.slack_hi(k, j), L.soc(k, j), L.slack_lo(k, j)]
            g_vals += [1.0, -1.0, -1.0, -1.0]
            h += [config.soc_max, -config.soc_min]
            lb[L.slack_lo(k, j)] = 0.0
            lb[L.slack_hi(k, j)] = 0.0
    G = sp.csr_matrix((g_vals, (g_rows, g_cols)), shape=(len(h), n))

    # power boxes
    for k in range(n_p):
        for i in range(nv):
            lb[L.p_ch(k, i)] = 0.0
            lb[L.p_dis(k, i)] = 0.0
        for j, i in enumerate(batt):
            ub[L.p_ch(k, i)] = context.packs[j].p_ch_max / KW
            ub[L.p_dis(k, i)] = context.packs[j].p_dis_max / KW
        if v_lower == "affine":
            for i in range(nv):
                lb[L.v(k, i)[0]] = config.v_lower_frac

    # voltage magnitude and inductor current cones
    quad = []
    r_i = config.i_dq_max / V  # current bound per unit of v_ll
    for k in range(n_p):
        models = _models(pred.gains[k])
        if models is None:
            raise PredictionError("gains must come from GainCache")
        vk = L.v(k)
        for i in range(nv):
            quad.append(qcqp.QuadConstraint.from_block(n, L.v(k, i), 2.0 * np.eye(2), None,
                                                       -config.v_upper_frac**2))
        for i in range(nv):
            M = models[i].g_iL / r_i  # 2 x 2N, so |M v_pu| <= 1
            quad.append(qcqp.QuadConstraint.from_block(n, vk, 2.0 * M.T @ M, None, -1.0))
    return ConstraintSet(A, b, G, np.asarray(h, dtype=float), quad, lb, ub, labels)


def assemble(state, pred, linearizations, config, context, eta_ch, eta_dis, v_lower="affine"):
    """Build the full scaled QcqpProblem; returns ``(problem, layout, objective_terms)``."""
    top = context.topology
    nv, nb = top.n_vsc, len(top.vsc_indices("battery"))
    L = Layout(nv, nb, config.n_p)
    obj = build_objective(pred.gains[: config.n_p], eta_ch, eta_dis, top)
    cons = build_constraints(state, pred, linearizations, config, context, eta_ch, eta_dis, L, v_lower)

    scale_v = config.v_ll**2 / KW  # W/V^2 * V^2 -> kW
    r_, c_, v_ = [], [], []
    for k in range(config.n_p):
        idx = L.v(k)
        q = 2.0 * scale_v * obj.q_v[k]
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        r_.append(ii.ravel())
        c_.append(jj.ravel())
        v_.append(q.ravel())
    Q = sp.csr_matrix((np.concatenate(v_), (np.concatenate(r_), np.concatenate(c_))), shape=(L.n, L.n))
    c = np.zeros(L.n)
    pen = config.soc_slack_penalty / KW
    for k in range(config.n_p):
        for j, i in enumerate(top.vsc_indices("battery")):
            c[L.p_ch(k, i)] = obj.c_ch[j]
            c[L.p_dis(k, i)] = obj.c_dis[j]
            c[L.slack_lo(k, j)] = pen
            c[L.slack_hi(k, j)] = pen
    prob = qcqp.QcqpProblem(L.n, Q=Q, c=c, A=cons.A, b=cons.b, G=cons.G, h=cons.h,
                            quad=cons.quad, lb=cons.lb, ub=cons.ub, check=False)
    return prob, L, obj


# ---------------------------------------------------------------------------
# receding horizon step


def nominal_plan(state: MpcState, config: MpcConfig, n_vsc: int) -> np.ndarray:
    """Linearisation points: previous plan shifted by one step, or flat start."""
    flat = np.tile([config.v_ll, 0.0], n_vsc)
    if state.prev_plan is None:
        return np.tile(flat, (config.n_p, 1))
    prev = np.asarray(state.prev_plan, dtype=float)
    shifted = np.vstack([prev[1:], prev[-1:]])
    if shifted.shape[0] < config.n_p:
        shifted = np.vstack([shifted, np.repeat(shifted[-1:], config.n_p - shifted.shape[0], axis=0)])
    return shifted[: config.n_p]


def linearize_plan(pred: Predictions, plan: np.ndarray, n_vsc: int):
    return [[linearize_power(models_k[i], plan[k]) for i in range(n_vsc)]
            for k, (_, models_k, _) in enumerate(pred.gains[: plan.shape[0]])]


def unpack(x: np.ndarray, L: Layout, config: MpcConfig, top: NetworkTopology):
    nv = top.n_vsc
    v = np.array([x[L.v(k)] for k in range(L.n_p)]) * config.v_ll
    p_ch = np.array([[x[L.p_ch(k, i)] for i in range(nv)] for k in range(L.n_p)]) * KW
    p_dis = np.array([[x[L.p_dis(k, i)] for i in range(nv)] for k in range(L.n_p)]) * KW
    soc = np.array([[x[L.soc(k, j)] for j in range(L.n_batt)] for k in range(L.n_p)])
    slack = np.array([[max(x[L.slack_lo(k, j)], x[L.slack_hi(k, j)]) for j in range(L.n_batt)]
                      for k in range(L.n_p)])
    return v, p_ch, p_dis, soc, slack


def mpc_step(state: MpcState, measurements: dict, pred: Predictions, config: MpcConfig,
             context: MpcContext, dump_path=None) -> tuple[MpcDecision, MpcState]:
    """One control interval: refresh efficiencies, linearise about the shifted
    previous plan, solve, dispatch the first-step voltages.

    ``measurements`` may carry ``soc`` (per battery) and ``p_vsc`` (per VSC, W,
    realised over the last interval). Returns the decision and the next state.
    """
    top = context.topology
    nv = top.n_vsc
    batt = top.vsc_indices("battery")
    soc = np.clip(np.asarray(measurements.get("soc", state.soc), dtype=float), 0.0, 1.0)
    p_vsc = measurements.get("p_vsc")
    prev_batt_p = None if p_vsc is None else np.asarray(p_vsc, dtype=float)[batt]
    state = replace(state, soc=soc, prev_p_vsc=prev_batt_p)
    eta_ch, eta_dis = update_efficiencies(state, context.eff_poly, config)

    plan0 = nominal_plan(state, config, nv)
    lins = linearize_plan(pred, plan0, nv)
    prob, L, obj = assemble(state, pred, lins, config, context, eta_ch, eta_dis)
    if dump_path is not None:
        from .qcqp.io import dump

        dump(prob, dump_path)
    x0 = None
    sol = qcqp.solve(prob, tol=config.tol, x0=x0)
    diag = {"status": sol.status, "iterations": sol.iterations, "solve_time": sol.solve_time,
            "kkt": sol.kkt.max(), "alarm": False}
    usable = sol.status == "optimal" or (sol.status == "max_iter" and sol.kkt.max() <= 1e-5)
    if not usable:
        log.warning("MPC solve returned %s (kkt %.2e); holding previous references", sol.status, sol.kkt.max())
        diag["alarm"] = True
        hold = state.last_reference if state.last_reference is not None else plan0[0]
        v_plan = np.tile(hold, (config.n_p, 1))
        zeros = np.zeros((config.n_p, nv))
        decision = MpcDecision(hold.copy(), v_plan, zeros, zeros.copy(),
                               np.tile(soc, (config.n_p + 1, 1)), math.nan, eta_ch, eta_dis, diag)
        return decision, replace(state, eta_ch=eta_ch, eta_dis=eta_dis, prev_plan=v_plan,
                                 last_reference=hold.copy())
    v, p_ch, p_dis, soc_pred, slack = unpack(sol.x, L, config, top)
    diag["max_slack"] = float(slack.max(initial=0.0))
    diag["objective_kw"] = sol.objective
    objective = obj.value(v, p_ch[:, batt], p_dis[:, batt])
    decision = MpcDecision(
        v_ref=v[0].copy(), v_plan=v, p_ch=p_ch, p_dis=p_dis,
        soc_pred=np.vstack([soc[None, :], soc_pred]), objective=objective,
        eta_ch=eta_ch, eta_dis=eta_dis, diagnostics=diag,
    )
    new_state = replace(state, prev_plan=v, eta_ch=eta_ch, eta_dis=eta_dis, last_reference=v[0].copy())
    return decision, new_state
