"""Ground-truth microgrid simulator at the controller sampling rate.

The network is solved in steady state at the applied VSC voltages with the
true load resistances. PV converters track their available power through a
PI correction of the d-axis voltage reference, and batteries follow the exact
cell model rather than the controller's polynomial surrogate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .battery import BatteryPack, InfeasiblePowerError, efficiency, max_deliverable_power, ocv_and_resistance, solve_cell_current
from .netmodel import NetworkTopology, StaticGains, resistive_load_gains
from .vsc import all_vsc_models

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlantConfig:
    t_s: float = 60.0
    v_ll: float = 415.0
    v_upper_frac: float = 1.1
    v_lower_frac: float = 0.9
    kp: float = 1e-4  # V/W
    ki: float = 1e-3  # V/(W s)
    pi_dt: float = 0.05  # s, inner PI update period
    pi_rtol: float = 1e-9  # settle tolerance relative to the PV setpoint


@dataclass
class PlantState:
    soc: np.ndarray  # per battery, fraction
    v_dc: np.ndarray  # per battery, V
    v_applied: np.ndarray  # 2N, V
    k: int = 0
    currents: dict = field(default_factory=dict)

    def __post_init__(self):
        self.soc = np.asarray(self.soc, dtype=float)
        if np.any(self.soc < 0) or np.any(self.soc > 1):
            raise ValueError("SoC must lie in [0, 1]")


@dataclass
class Measurements:
    soc: np.ndarray  # per battery, after the interval
    p_vsc: np.ndarray  # per VSC, W (positive = injecting into the network)
    q_vsc: np.ndarray  # per VSC, var at the filter output
    i_rms: np.ndarray  # per VSC, A phase RMS of the inductor current
    v_rms_pu: np.ndarray  # per VSC output voltage, pu of v_ll
    v_applied: np.ndarray  # 2N, V
    load_power: float  # W actually drawn by the loads
    pv_power: float  # W delivered by PV converters
    line_loss: float  # W
    filter_loss: float  # W
    battery_loss: float  # W inside the cells
    audit_residual: float  # relative power balance error
    saturated: np.ndarray  # per battery, True when clamped to deliverable power
    pv_clamped: bool = False

    @property
    def network_loss(self) -> float:
        return self.line_loss + self.filter_loss

    @property
    def total_loss(self) -> float:
        return self.line_loss + self.filter_loss + self.battery_loss

    def as_dict(self) -> dict:
        return {"soc": self.soc, "p_vsc": self.p_vsc}


def initial_state(topology: NetworkTopology, packs: list[BatteryPack], v_ll: float = 415.0) -> PlantState:
    soc = np.array([p.soc for p in packs], dtype=float)
    v_dc = np.array([p.n_series * ocv_and_resistance(p.soc, p.coeffs)[0] for p in packs])
    return PlantState(soc=soc, v_dc=v_dc, v_applied=np.tile([v_ll, 0.0], topology.n_vsc))


def _power_quadratic(model, v: np.ndarray, axis: int):
    """Coefficients ``(a, b, c)`` of the VSC power as a function of one
    voltage component ``t = v[axis]`` with the others held fixed."""
    e = np.zeros_like(v)
    e[axis] = 1.0
    v0 = v.copy()
    v0[axis] = 0.0
    g_il, g_u = model.g_iL, model.g_u
    a = float((g_u @ e) @ (g_il @ e))
    b = float((g_u @ e) @ (g_il @ v0) + (g_u @ v0) @ (g_il @ e))
    c = float((g_u @ v0) @ (g_il @ v0))
    return a, b, c


def pv_voltage_correction(model, v: np.ndarray, i_pv: int, p_target: float, config: PlantConfig):
    """PI adjustment of the PV converter's d-axis reference so its power matches
    ``p_target``. Returns ``(v_corrected, clamped)``.

    The discrete PI runs over one sampling interval; if it has not settled to
    ``pi_rtol`` the exact settled value (root of the scalar power quadratic
    nearest the reference) is used, which is where the loop converges.
    """
    ax = 2 * i_pv
    a, b, c = _power_quadratic(model, v, ax)
    vq = v[ax + 1]
    # shaved by 1e-12 so rounding in the sqrt cannot land above the limit
    v_hi = math.sqrt(max((config.v_upper_frac * config.v_ll) ** 2 - vq * vq, 0.0)) * (1 - 1e-12)
    v_lo = config.v_lower_frac * config.v_ll
    t = v[ax]
    integ = 0.0
    tol = config.pi_rtol * max(abs(p_target), 1.0)
    t_ref = t
    for _ in range(int(round(config.t_s / config.pi_dt))):
        err = p_target - (a * t * t + b * t + c)
        if abs(err) <= tol:
            break
        integ += err * config.pi_dt
        t = t_ref + config.kp * err + config.ki * integ
    err = p_target - (a * t * t + b * t + c)
    if abs(err) > tol:
        t = _settled_root(a, b, c - p_target, v[ax])
    clamped = False
    if t is None or not (v_lo <= t <= v_hi):
        clamped = True
        t = v[ax] if t is None else min(max(t, v_lo), v_hi)
    out = v.copy()
    out[ax] = t
    return out, clamped


def _settled_root(a, b, c, t0):
    if abs(a) < 1e-300:
        return -c / b if b != 0 else None
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    sq = math.sqrt(disc)
    q = -0.5 * (b + math.copysign(sq, b))
    roots = [q / a] + ([c / q] if q != 0 else [])
    return min(roots, key=lambda r: abs(r - t0))


def plant_step(state: PlantState, topology: NetworkTopology, packs: list[BatteryPack],
               v_ref: np.ndarray, p_mpp: np.ndarray, load_power: np.ndarray,
               config: PlantConfig | None = None, gains: StaticGains | None = None,
               noise=None) -> tuple[PlantState, Measurements]:
    """Advance the plant one sampling interval.

    ``v_ref``: 2N output voltage references (V); ``p_mpp``: available power
    per PV converter (W); ``load_power``: true per-load power at rated voltage
    (W, topology load order). ``noise`` is an optional callable applied to the
    measured SoC and powers.
    """
    config = config or PlantConfig()
    top = topology
    batt = top.vsc_indices("battery")
    pv = top.vsc_indices("pv")
    if gains is None:
        gains = resistive_load_gains(top, load_power, config.v_ll)
    models = all_vsc_models(gains, top)
    v = np.asarray(v_ref, dtype=float).copy()

    pv_clamped = False
    for m, i in enumerate(pv):
        v, cl = pv_voltage_correction(models[i], v, i, float(p_mpp[m]), config)
        pv_clamped |= cl

    i_l = np.array([mdl.g_iL @ v for mdl in models])  # N x 2
    u = np.array([mdl.g_u @ v for mdl in models])
    i_o = (gains.g_io @ v).reshape(-1, 2)
    i_line = (gains.g_iline @ v).reshape(-1, 2)
    i_load = (gains.g_iload @ v).reshape(-1, 2)
    vo = v.reshape(-1, 2)
    p_vsc = np.einsum("ij,ij->i", u, i_l)
    q_vsc = vo[:, 1] * i_o[:, 0] - vo[:, 0] * i_o[:, 1]

    line_loss = float(sum(ln.r * (i_line[j] @ i_line[j]) for j, ln in enumerate(top.lines)))
    filter_loss = float(sum(vs.lcl.r_f * (i_l[i] @ i_l[i]) + vs.lcl.r_c * (i_o[i] @ i_o[i])
                            for i, vs in enumerate(top.vscs)))
    load_p = np.asarray(load_power, dtype=float)
    r_load = np.where(load_p > 0, config.v_ll**2 / np.where(load_p > 0, load_p, 1.0), math.inf)
    load_drawn = float(sum(r * (i_load[j] @ i_load[j]) for j, r in enumerate(r_load) if math.isfinite(r)))

    # exact battery update
    soc = state.soc.copy()
    v_dc = state.v_dc.copy()
    sat = np.zeros(len(batt), dtype=bool)
    batt_loss = 0.0
    for j, i in enumerate(batt):
        pack = packs[j]
        p = float(p_vsc[i])
        try:
            i_cell = solve_cell_current(soc[j], p, pack)
        except InfeasiblePowerError as exc:
            log.warning("battery %d: %.0f W exceeds deliverable %.0f W; clamping", j, p, exc.p_max)
            sat[j] = True
            p = max_deliverable_power(soc[j], pack) * (1 - 1e-12)
            i_cell = solve_cell_current(soc[j], p, pack)
        eta = efficiency(soc[j], p, pack)
        v_oc, r_t = ocv_and_resistance(soc[j], pack.coeffs)
        v_dc[j] = pack.n_series * (v_oc - i_cell * r_t)
        if p >= 0:
            d_soc = -config.t_s * p / (eta * pack.e_max)
            batt_loss += p / eta - p
        else:
            d_soc = -eta * config.t_s * p / pack.e_max
            batt_loss += -p * (1.0 - eta)
        new = soc[j] + d_soc
        if not 0.0 <= new <= 1.0:
            sat[j] = True
            new = min(max(new, 0.0), 1.0)
        soc[j] = new

    supplied = float(np.sum(p_vsc))
    consumed = load_drawn + line_loss + filter_loss
    audit = abs(supplied - consumed) / max(abs(supplied), abs(consumed), 1.0)

    i_rms = np.linalg.norm(i_l, axis=1) / math.sqrt(3.0)
    v_rms = np.linalg.norm(vo, axis=1) / config.v_ll
    meas_soc, meas_p = soc.copy(), p_vsc.copy()
    if noise is not None:
        meas_soc, meas_p = noise(meas_soc, meas_p)
    meas = Measurements(
        soc=meas_soc, p_vsc=meas_p, q_vsc=q_vsc, i_rms=i_rms, v_rms_pu=v_rms, v_applied=v,
        load_power=load_drawn, pv_power=float(sum(p_vsc[i] for i in pv)), line_loss=line_loss,
        filter_loss=filter_loss, battery_loss=batt_loss, audit_residual=audit, saturated=sat,
        pv_clamped=pv_clamped,
    )
    new_state = PlantState(soc=soc, v_dc=v_dc, v_applied=v, k=state.k + 1,
                           currents={"i_l": i_l, "i_o": i_o, "i_line": i_line, "i_load": i_load})
    return new_state, meas
