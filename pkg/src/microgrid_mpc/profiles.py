"""PV and load profiles, the moving-average predictor and synthetic data.

Profiles are sampled at one-minute resolution. The bundled weather trace is
synthetic (clear-sky envelope with cloud transients) and can be replaced by
real data through ``load_weather_csv``.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import expit

Q_E = 1.602176634e-19
K_B = 1.380649e-23


@dataclass
class Profile:
    t: np.ndarray  # s
    values: np.ndarray  # W
    kind: str = "load"  # pv | load

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.t.shape != self.values.shape:
            raise ValueError("t and values must have the same length")
        if np.any(self.values < 0):
            raise ValueError("profile values must be non-negative")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("profile times must be strictly increasing")
        if self.kind not in ("pv", "load"):
            raise ValueError(f"unknown profile kind {self.kind!r}")

    def __len__(self):
        return self.t.size


# ---------------------------------------------------------------------------
# prediction


class Predictor:
    """Trailing moving-average forecaster.

    Parameters
    ----------
    window : float
        Averaging window in seconds; must be a multiple of ``t_s``.
    t_s : float
        Sampling interval in seconds.
    """

    def __init__(self, window: float = 300.0, t_s: float = 60.0):
        n = window / t_s
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError("window must be a positive multiple of t_s")
        self.window, self.t_s = window, t_s
        self.history: deque = deque(maxlen=int(round(n)))

    def observe(self, value) -> None:
        self.history.append(np.asarray(value, dtype=float))

    def mean(self) -> np.ndarray:
        if not self.history:
            raise ValueError("predictor has no history")
        return np.mean(np.array(self.history), axis=0)


def predict(predictor: Predictor, horizon_steps: int) -> np.ndarray:
    """Constant forecast equal to the trailing window mean, repeated over the
    horizon. Returns shape ``(horizon_steps,) + value_shape``."""
    m = predictor.mean()
    return np.repeat(m[None, ...], horizon_steps, axis=0)


def forecast_rmse(truth, window_steps: int = 5) -> float:
    """RMSE of the one-step-ahead moving-average forecast, normalised by the
    mean of the truth over the forecast samples."""
    x = np.asarray(truth, dtype=float)
    if x.size <= window_steps:
        raise ValueError("series too short for the window")
    pred = np.convolve(x, np.ones(window_steps) / window_steps, mode="valid")[:-1]
    tru = x[window_steps:]
    return float(np.sqrt(np.mean((pred - tru) ** 2)) / np.mean(tru))


# ---------------------------------------------------------------------------
# load


def generate_load_profile(base: Profile, step_bound: float = 0.0075, seed: int = 0) -> Profile:
    """Multiply ``base`` by a random walk whose per-sample relative steps are
    uniform in ``[-step_bound, step_bound]``."""
    if step_bound < 0:
        raise ValueError("step_bound must be non-negative")
    rng = np.random.default_rng(seed)
    steps = rng.uniform(-step_bound, step_bound, size=len(base) - 1)
    walk = np.concatenate([[1.0], np.cumprod(1.0 + steps)])
    return Profile(base.t.copy(), base.values * walk, base.kind)


# Residential per-unit daily shape, hourly points at hh:00.
RESIDENTIAL_SHAPE = (
    0.40, 0.35, 0.32, 0.30, 0.30, 0.32, 0.40, 0.50, 0.55, 0.55, 0.55, 0.58,
    0.60, 0.58, 0.55, 0.55, 0.60, 0.70, 0.85, 0.95, 1.00, 0.90, 0.70, 0.50,
)


def residential_base(start_hour: float, minutes: int, peak_w: float) -> Profile:
    hours = start_hour + np.arange(minutes) / 60.0
    shape = np.interp(hours % 24.0, np.arange(25), RESIDENTIAL_SHAPE + RESIDENTIAL_SHAPE[:1])
    return Profile(np.arange(minutes) * 60.0, shape * peak_w, "load")


def split_load(total: np.ndarray, n_loads: int) -> np.ndarray:
    """Divide a total load evenly between ``n_loads`` buses; shape (T, n_loads)."""
    return np.repeat(np.asarray(total, dtype=float)[:, None] / n_loads, n_loads, axis=1)


# ---------------------------------------------------------------------------
# PV


@dataclass(frozen=True)
class PanelParams:
    """Single-diode module model, defaults for a 200 W polycrystalline module."""

    i_sc: float = 8.21
    v_oc: float = 32.9
    k_v: float = -0.123  # V/K
    k_i: float = 0.0032  # A/K
    n_cells: int = 54
    ideality: float = 1.3
    r_s: float = 0.221
    r_p: float = 415.405
    i_pv_n: float = 8.214
    g_n: float = 1000.0
    t_n: float = 298.15
    nominal_w: float = 100e3  # plant rating at STC
    noct: float = 45.0


def _module_current(v, i_pv, i_0, a_vt, r_s, r_p):
    def f(i):
        return i_pv - i_0 * math.expm1((v + r_s * i) / a_vt) - (v + r_s * i) / r_p - i

    hi = i_pv + 1.0
    lo = -1.0
    while f(lo) < 0:
        lo *= 2.0
    return brentq(f, lo, hi, xtol=1e-12)


def module_mpp(irradiance: float, cell_temp_c: float, panel: PanelParams = PanelParams()) -> float:
    """Maximum power (W) of one module by a bounded sweep over terminal voltage."""
    if irradiance < 0:
        raise ValueError("irradiance must be non-negative")
    if irradiance == 0:
        return 0.0
    T = cell_temp_c + 273.15
    dT = T - panel.t_n
    a_vt = panel.ideality * panel.n_cells * K_B * T / Q_E
    i_pv = (panel.i_pv_n + panel.k_i * dT) * irradiance / panel.g_n
    i_0 = (panel.i_sc + panel.k_i * dT) / math.expm1((panel.v_oc + panel.k_v * dT) / a_vt)
    v_max = panel.v_oc + panel.k_v * dT + 5.0

    def neg_p(v):
        return -v * _module_current(v, i_pv, i_0, a_vt, panel.r_s, panel.r_p)

    res = minimize_scalar(neg_p, bounds=(0.0, v_max), method="bounded", options={"xatol": 1e-9})
    return max(-float(res.fun), 0.0)


def cell_temperature(irradiance, ambient_c, noct: float = 45.0):
    return np.asarray(ambient_c, dtype=float) + (noct - 20.0) / 800.0 * np.asarray(irradiance, dtype=float)


def pv_power_from_weather(irradiance, temperature, panel: PanelParams = PanelParams()):
    """Plant MPP power (W) scaled so STC (1000 W/m2, 25 C cell) gives
    ``panel.nominal_w``. ``temperature`` is the cell temperature; use
    ``cell_temperature`` to convert from ambient."""
    g = np.atleast_1d(np.asarray(irradiance, dtype=float))
    t = np.broadcast_to(np.asarray(temperature, dtype=float), g.shape)
    if np.any(g < 0):
        raise ValueError("irradiance must be non-negative")
    scale = panel.nominal_w / module_mpp(panel.g_n, panel.t_n - 273.15, panel)
    out = np.array([module_mpp(gi, ti, panel) * scale for gi, ti in zip(g, t)])
    return float(out[0]) if np.ndim(irradiance) == 0 else out


# ---------------------------------------------------------------------------
# synthetic weather


def synthesize_weather(minutes: int = 600, start_hour: float = 6.0, seed: int = 2019,
                       cloud_rate: float = 1 / 25.0, cloud_depth=(0.25, 0.75)):
    """Clear-sky irradiance envelope with randomly placed cloud transients.

    Returns ``(t_s, irradiance_wm2, ambient_c)``. Cloud passages arrive as a
    Poisson process (``cloud_rate`` per minute) with random duration and depth,
    softened at the edges, plus a small minute-scale flicker.
    """
    rng = np.random.default_rng(seed)
    t_min = np.arange(minutes)
    hours = start_hour + t_min / 60.0
    sunrise, sunset = 6.1, 19.8
    elev = np.clip(np.sin(np.pi * (hours - sunrise) / (sunset - sunrise)), 0.0, None)
    clear = 1040.0 * elev**1.25
    kt = np.ones(minutes)
    n_clouds = rng.poisson(cloud_rate * minutes)
    for _ in range(n_clouds):
        c = rng.uniform(0, minutes)
        width = rng.uniform(3.0, 18.0)
        depth = rng.uniform(*cloud_depth)
        edge = rng.uniform(0.7, 2.5)
        shape = expit((t_min - (c - width / 2)) / edge) - expit((t_min - (c + width / 2)) / edge)
        kt *= 1.0 - depth * shape
    kt *= 1.0 + 0.01 * rng.standard_normal(minutes)
    irr = np.clip(clear * kt, 0.0, None)
    ambient = 18.0 + 12.0 * np.clip(np.sin(np.pi * (hours - 7.0) / 13.0), 0.0, None) + 0.2 * rng.standard_normal(minutes)
    return t_min * 60.0, irr, ambient


# ---------------------------------------------------------------------------
# CSV io


def _read_columns(path, names):
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    missing = [n for n in names if n not in rows[0]]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return [np.array([float(r[n]) for r in rows]) for n in names]


def load_weather_csv(path):
    """Read ``t_s, irradiance_wm2, temp_c`` columns."""
    return _read_columns(path, ["t_s", "irradiance_wm2", "temp_c"])


def load_load_csv(path) -> Profile:
    t, kw = _read_columns(path, ["t_s", "total_kw"])
    return Profile(t, kw * 1e3, "load")


def write_weather_csv(path, t, irr, temp) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "irradiance_wm2", "temp_c"])
        for row in zip(t, irr, temp):
            w.writerow([f"{row[0]:.0f}", f"{row[1]:.3f}", f"{row[2]:.3f}"])


def write_load_csv(path, profile: Profile) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "total_kw"])
        for t, v in zip(profile.t, profile.values):
            w.writerow([f"{t:.0f}", f"{v / 1e3:.6f}"])
