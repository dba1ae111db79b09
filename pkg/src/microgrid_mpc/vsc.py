"""Static VSC model behind an LCL filter and the affine power approximation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VscStaticModel:
    index: int
    g_iL: np.ndarray  # 2 x 2N, inductor current gain
    g_u: np.ndarray  # 2 x 2N, input (bridge) voltage gain

    def inductor_current(self, v_odq: np.ndarray) -> np.ndarray:
        return self.g_iL @ v_odq

    def input_voltage(self, v_odq: np.ndarray) -> np.ndarray:
        return self.g_u @ v_odq

    def power(self, v_odq: np.ndarray) -> float:
        """Exact DC-side power at stacked output voltages ``v_odq``."""
        return dc_power(self.g_u @ v_odq, self.g_iL @ v_odq)


@dataclass
class PowerLinearization:
    coeff: np.ndarray  # W per volt, length 2N
    offset: float
    nominal_i_Ldq: np.ndarray
    nominal_u_dq: np.ndarray

    def __call__(self, v_odq: np.ndarray) -> float:
        return float(self.coeff @ v_odq + self.offset)


def selector(i: int, n_vsc: int) -> np.ndarray:
    """``e_i^T kron I2``: picks VSC ``i``'s d-q pair out of the stacked vector."""
    s = np.zeros((2, 2 * n_vsc))
    s[0, 2 * i] = 1.0
    s[1, 2 * i + 1] = 1.0
    return s


def vsc_static_gains(gains, params, vsc_index: int, omega: float) -> VscStaticModel:
    n = gains.n_vsc
    if not 0 <= vsc_index < n:
        raise IndexError(f"vsc_index {vsc_index} out of range for {n} VSCs")
    sel = selector(vsc_index, n)
    wc = omega * params.c_f
    wl = omega * params.l_f
    g_il = np.array([[0.0, -wc], [wc, 0.0]]) @ sel + gains.g_io_block(vsc_index)
    g_u = np.array([[params.r_f, -wl], [wl, params.r_f]]) @ g_il + sel
    return VscStaticModel(index=vsc_index, g_iL=g_il, g_u=g_u)


def all_vsc_models(gains, topology) -> list[VscStaticModel]:
    return [vsc_static_gains(gains, v.lcl, i, topology.omega) for i, v in enumerate(topology.vscs)]


def dc_power(u_dq, i_ldq) -> float:
    u = np.asarray(u_dq, dtype=float)
    i = np.asarray(i_ldq, dtype=float)
    return float(u[0] * i[0] + u[1] * i[1])


def linearize_power(model: VscStaticModel, nominal_v_odq) -> PowerLinearization:
    """First-order expansion of the bilinear DC power about ``nominal_v_odq``."""
    v0 = np.asarray(nominal_v_odq, dtype=float)
    i_l = model.g_iL @ v0
    u = model.g_u @ v0
    coeff = u @ model.g_iL + i_l @ model.g_u
    offset = -float(u @ i_l)
    return PowerLinearization(coeff=coeff, offset=offset, nominal_i_Ldq=i_l, nominal_u_dq=u)


def pwm_control_signal(u_dq, a_m: float, v_dc: float) -> np.ndarray:
    """Modulation signal ``u_dq = u~_dq / (a_m V_dc)``. Not used by the optimiser."""
    return np.asarray(u_dq, dtype=float) / (a_m * v_dc)
