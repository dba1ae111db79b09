"""Lithium-ion pack model: open-circuit voltage, terminal resistance,
charge/discharge efficiency and the quadratic efficiency surrogate used by
the controller.

Sign convention: positive VSC power means the battery discharges into the
AC side. Cell current follows the same sign (discharge positive).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)


class InfeasiblePowerError(ValueError):
    """Requested power exceeds what the pack can deliver at this SoC."""

    def __init__(self, p_vsc: float, p_max: float):
        super().__init__(
            f"requested {p_vsc:.1f} W exceeds max deliverable power {p_max:.1f} W"
        )
        self.p_vsc = p_vsc
        self.p_max = p_max


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class CellCoeffs:
    """Cell OCV and resistance coefficients.

    ``a`` parameterises the open-circuit voltage, ``b`` the series resistance,
    ``c`` and ``d`` the short and long transient resistances. The default set
    is the lithium-polymer cell of Chen and Rincon-Mora (2006) with the
    constant OCV term raised by 97.1 mV so that a full cell reads 4.2 V.
    """

    a: tuple[float, ...] = (-1.031, 35.0, 3.7821, 0.2156, 0.1178, 0.3201)
    b: tuple[float, ...] = (0.1562, 24.37, 0.07446, 0.0, 0.0, 0.0)
    c: tuple[float, ...] = (0.3208, 29.14, 0.04669)
    d: tuple[float, ...] = (6.603, 155.2, 0.04984)

    def __post_init__(self):
        if len(self.a) != 6 or len(self.b) != 6 or len(self.c) != 3 or len(self.d) != 3:
            raise ValueError("CellCoeffs needs 6 a, 6 b, 3 c and 3 d coefficients")


@dataclass
class BatteryPack:
    coeffs: CellCoeffs = field(default_factory=CellCoeffs)
    n_series: int = 215
    n_para: int = 130
    e_max: float = 3.6e8  # Ws
    soc: float = 0.5
    p_ch_max: float = 1e5
    p_dis_max: float = 1e5

    def __post_init__(self):
        if self.n_series < 1 or self.n_para < 1:
            raise ValueError("cell counts must be >= 1")
        if self.e_max <= 0:
            raise ValueError("e_max must be positive")
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc {self.soc} outside [0, 1]")

    @property
    def n_cells(self) -> int:
        return self.n_series * self.n_para

    def with_soc(self, soc: float) -> "BatteryPack":
        return replace(self, soc=soc)


def ocv_and_resistance(soc, coeffs: CellCoeffs):
    """Return ``(v_oc, r_t)`` for one cell. Accepts scalars or arrays."""
    s = np.asarray(soc, dtype=float)
    a, b, c, d = coeffs.a, coeffs.b, coeffs.c, coeffs.d
    v_oc = a[0] * np.exp(-a[1] * s) + a[2] + a[3] * s - a[4] * s**2 + a[5] * s**3
    r_s = b[0] * np.exp(-b[1] * s) + b[2] + b[3] * s - b[4] * s**2 + b[5] * s**3
    r_ts = c[0] * np.exp(-c[1] * s) + c[2]
    r_tl = d[0] * np.exp(-d[1] * s) + d[2]
    r_t = r_s + r_ts + r_tl
    if v_oc.ndim == 0:
        return float(v_oc), float(r_t)
    return v_oc, r_t


def max_deliverable_power(soc: float, pack: BatteryPack) -> float:
    v_oc, r_t = ocv_and_resistance(soc, pack.coeffs)
    return v_oc**2 * pack.n_cells / (4.0 * r_t)


def _cell_current(v_oc: float, r_t: float, p_vsc: float, n_cells: int) -> float:
    # i^2 - i V/R + P/(N R) = 0; take the high-voltage (small |i|) root
    disc = v_oc * v_oc - 4.0 * r_t * p_vsc / n_cells
    if disc < 0.0:
        # tolerate round-off right at the maximum-power point
        if disc > -1e-12 * v_oc * v_oc:
            disc = 0.0
        else:
            raise InfeasiblePowerError(p_vsc, v_oc**2 * n_cells / (4.0 * r_t))
    root = np.sqrt(disc)
    # 2c / (-b + root) form avoids cancellation for small |p|
    q = p_vsc / n_cells
    denom = v_oc + root
    return 2.0 * q / denom


def solve_cell_current(soc: float, p_vsc: float, pack: BatteryPack) -> float:
    """Cell current for a VSC power draw ``p_vsc`` (W) at the given SoC."""
    v_oc, r_t = ocv_and_resistance(soc, pack.coeffs)
    return _cell_current(v_oc, r_t, p_vsc, pack.n_cells)


def efficiency(soc: float, p_vsc: float, pack: BatteryPack) -> float:
    """Exact charge (``p_vsc <= 0``) or discharge efficiency at this operating point."""
    if p_vsc == 0.0:
        return 1.0
    v_oc, r_t = ocv_and_resistance(soc, pack.coeffs)
    i = _cell_current(v_oc, r_t, p_vsc, pack.n_cells)
    if i <= 0.0:
        return v_oc / (v_oc - i * r_t)
    return (v_oc - i * r_t) / v_oc


@dataclass(frozen=True)
class EffPoly:
    """Quadratic surrogates for the charge efficiency and the inverse discharge
    efficiency as functions of SoC (fraction) and power magnitude (W).

    Coefficient order in ``ch`` and ``dis``: constant, SoC, SoC^2, P, P^2, SoC*P.
    """

    ch: tuple[float, ...]
    dis: tuple[float, ...]
    soc_range: tuple[float, float] = (0.2, 1.0)
    p_range: tuple[float, float] = (0.0, 1e5)


# Reference coefficient set. Units inferred: SoC as a fraction, P as a
# positive per-direction magnitude in watts.
REFERENCE_POLY = EffPoly(
    ch=(1.00, 4.00e-3, -3.11e-3, -4.77e-7, 3.06e-13, 9.66e-8),
    dis=(1.00, -4.60e-3, 4.13e-3, 5.00e-7, 4.23e-13, -1.36e-7),
)

EFF_PRESETS = {"reference": REFERENCE_POLY}


def _design(soc, p):
    soc = np.asarray(soc, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    return np.column_stack([np.ones_like(soc), soc, soc**2, p, p**2, soc * p])


def eval_eff(poly: EffPoly, soc: float, p: float, direction: str) -> float:
    """Evaluate ``eta_ch`` (direction="charge") or ``1/eta_dis`` ("discharge")."""
    if direction not in ("charge", "discharge"):
        raise ValueError(f"unknown direction {direction!r}")
    p = abs(p)
    lo, hi = poly.soc_range
    if not lo <= soc <= hi:
        log.warning("SoC %.4f outside fitted range [%g, %g]; clamping", soc, lo, hi)
        soc = min(max(soc, lo), hi)
    plo, phi = poly.p_range
    if not plo <= p <= phi:
        log.warning("power %.1f W outside fitted range [%g, %g]; clamping", p, plo, phi)
        p = min(max(p, plo), phi)
    c = poly.ch if direction == "charge" else poly.dis
    return float(c[0] + c[1] * soc + c[2] * soc**2 + c[3] * p + c[4] * p**2 + c[5] * soc * p)


def fit_eff_polynomials(pack: BatteryPack, soc_grid, power_grid) -> EffPoly:
    """Least-squares fit of both quadratic surrogates to the exact efficiency
    surface over the tensor grid ``soc_grid x power_grid`` (power magnitudes)."""
    soc_grid = np.asarray(soc_grid, dtype=float)
    power_grid = np.abs(np.asarray(power_grid, dtype=float))
    if soc_grid.size < 6 or power_grid.size < 6:
        raise FitError("need at least 6 grid points on each axis")
    S, P = np.meshgrid(soc_grid, power_grid, indexing="ij")
    s, p = S.ravel(), P.ravel()
    eta_ch = np.array([efficiency(si, -pi, pack) for si, pi in zip(s, p)])
    inv_dis = np.array([1.0 / efficiency(si, pi, pack) for si, pi in zip(s, p)])
    return EffPoly(
        ch=tuple(_lstsq_quadratic(s, p, eta_ch)),
        dis=tuple(_lstsq_quadratic(s, p, inv_dis)),
        soc_range=(float(soc_grid.min()), float(soc_grid.max())),
        p_range=(float(power_grid.min()), float(power_grid.max())),
    )


def _lstsq_quadratic(s, p, y):
    # normalise power to O(1) so the P^2 column does not swamp the rest
    p_scale = max(np.max(np.abs(p)), 1.0)
    X = _design(s, p / p_scale)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise FitError("rank-deficient design matrix; grids do not span the surface")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    unscale = np.array([1.0, 1.0, 1.0, 1 / p_scale, 1 / p_scale**2, 1 / p_scale])
    return coef * unscale


def default_eff_poly(pack: BatteryPack | None = None, n: int = 50) -> EffPoly:
    """Surrogate fitted to ``pack`` (default cell) on an ``n x n`` grid over
    SoC in [0.2, 1] and |P| in [0, 100 kW]."""
    pack = pack or BatteryPack()
    return fit_eff_polynomials(pack, np.linspace(0.2, 1.0, n), np.linspace(0.0, 1e5, n))


def soc_step(soc, p_ch, p_dis, eta_ch, eta_dis, t_s, e_max):
    """One sampling interval of the SoC recursion. Not clamped."""
    if p_ch < 0 or p_dis < 0:
        raise ValueError("p_ch and p_dis are magnitudes and must be >= 0")
    if p_ch > 0 and p_dis > 0:
        log.info("simultaneous charge %.3g W and discharge %.3g W", p_ch, p_dis)
    return soc + eta_ch * t_s * p_ch / e_max - t_s * p_dis / (eta_dis * e_max)


def pack_terminal_voltage(soc: float, i_cell: float, pack: BatteryPack) -> float:
    v_oc, r_t = ocv_and_resistance(soc, pack.coeffs)
    return pack.n_series * (v_oc - i_cell * r_t)
