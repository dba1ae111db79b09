"""Scenario configuration and the closed-loop controller/plant runner."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .battery import EFF_PRESETS, BatteryPack, CellCoeffs, EffPoly, default_eff_poly
from .mpc import GainCache, MpcConfig, MpcContext, MpcState, Predictions, attach_gains, mpc_step
from .netmodel import NetworkTopology, load_topology
from .plant import PlantConfig, initial_state, plant_step
from .profiles import (
    Predictor,
    cell_temperature,
    generate_load_profile,
    load_load_csv,
    load_weather_csv,
    predict,
    pv_power_from_weather,
    split_load,
)

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    topology_path: Path
    weather_path: Path
    load_path: Path
    initial_soc: list
    steps: int = 600
    seed: int = 1
    mode: str = "variable_eff"
    oracle: bool = False
    step_bound: float = 0.0075
    predictor_window: float = 300.0
    eff_preset: str = "fitted"  # "fitted" or a key of EFF_PRESETS
    weather_temp: str = "ambient"  # "ambient" (converted with NOCT) or "cell"
    mpc: dict = field(default_factory=dict)
    pack: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("topology_path", "weather_path", "load_path"):
            p = Path(getattr(self, name))
            if not p.is_file():
                raise ConfigError(f"{name}: file not found: {p}")
            setattr(self, name, p)
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in ("variable_eff", "constant_eff"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.eff_preset != "fitted" and self.eff_preset not in EFF_PRESETS:
            raise ConfigError(f"unknown efficiency preset {self.eff_preset!r}")

    def mpc_config(self) -> MpcConfig:
        try:
            return MpcConfig(mode=self.mode, **self.mpc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"mpc section: {exc}") from exc


def _numeric(d: dict) -> dict:
    # PyYAML reads exponents without a sign ("3.6e8") as strings
    out = {}
    for k, v in d.items():
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                pass
        elif isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def load_scenario(path, **overrides) -> ScenarioConfig:
    """Read a scenario YAML. Relative file paths resolve against the YAML's
    directory, then the bundled data directory."""
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must be a mapping")

    def resolve(key, default):
        p = Path(raw.get(key, default))
        if not p.is_absolute():
            for base in (path.parent, DATA_DIR):
                if (base / p).is_file():
                    return base / p
            return path.parent / p
        return p

    fields = dict(
        topology_path=resolve("topology", "ieee13.yaml"),
        weather_path=resolve("weather", "pv_weather.csv"),
        load_path=resolve("load", "load.csv"),
        initial_soc=list(raw.get("initial_soc", [])),
        steps=int(raw.get("steps", 600)),
        seed=int(raw.get("seed", 1)),
        mode=str(raw.get("mode", "variable_eff")),
        oracle=bool(raw.get("oracle", False)),
        step_bound=float(raw.get("load_step_bound", 0.0075)),
        predictor_window=float(raw.get("predictor_window_s", 300.0)),
        eff_preset=str(raw.get("efficiency", "fitted")),
        weather_temp=str(raw.get("weather_temperature", "ambient")),
        mpc=_numeric(dict(raw.get("mpc", {}) or {})),
        pack=_numeric(dict(raw.get("pack", {}) or {})),
    )
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**fields)


def bundled_scenario() -> Path:
    return DATA_DIR / "ieee13_scenario.yaml"


# ---------------------------------------------------------------------------


@dataclass
class ScenarioData:
    topology: NetworkTopology
    packs: list
    eff_poly: EffPoly
    mpc: MpcConfig
    plant: PlantConfig
    pv_true: np.ndarray  # T x n_pv, W
    load_true: np.ndarray  # T x n_loads, W


def prepare(cfg: ScenarioConfig) -> ScenarioData:
    try:
        top = load_topology(cfg.topology_path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"topology: {exc}") from exc
    n_batt = len(top.vsc_indices("battery"))
    if len(cfg.initial_soc) != n_batt:
        raise ConfigError(f"initial_soc needs {n_batt} values, got {len(cfg.initial_soc)}")
    pack_kw = dict(cfg.pack)
    coeffs = pack_kw.pop("coeffs", None)
    try:
        cc = CellCoeffs(**coeffs) if coeffs else CellCoeffs()
        packs = [BatteryPack(coeffs=cc, soc=float(s), **pack_kw) for s in cfg.initial_soc]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pack section: {exc}") from exc
    poly = default_eff_poly(packs[0]) if cfg.eff_preset == "fitted" else EFF_PRESETS[cfg.eff_preset]
    mcfg = cfg.mpc_config()
    pcfg = PlantConfig(t_s=mcfg.t_s, v_ll=mcfg.v_ll, v_upper_frac=mcfg.v_upper_frac,
                       v_lower_frac=mcfg.v_lower_frac)

    try:
        _, irr, temp = load_weather_csv(cfg.weather_path)
        base = load_load_csv(cfg.load_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"profile data: {exc}") from exc
    t_cell = cell_temperature(irr, temp) if cfg.weather_temp == "ambient" else temp
    n_pv = len(top.vsc_indices("pv"))
    pv = pv_power_from_weather(irr, t_cell)
    load = generate_load_profile(base, cfg.step_bound, cfg.seed).values
    horizon_needed = cfg.steps
    if len(pv) < horizon_needed or len(load) < horizon_needed:
        raise ConfigError(f"profiles cover {min(len(pv), len(load))} steps, run needs {cfg.steps}")
    pv_true = np.repeat(pv[:, None], n_pv, axis=1) / max(n_pv, 1)
    load_true = split_load(load, len(top.loads))
    return ScenarioData(top, packs, poly, mcfg, pcfg, pv_true, load_true)


@dataclass
class RunResult:
    trajectory: list  # per-step dict rows (deterministic)
    timing: list  # per-step dict rows with wall-clock solve times
    summary: dict
    decisions: list = field(default_factory=list)
    pv_true: np.ndarray | None = None
    load_true: np.ndarray | None = None
    soc_start: list = field(default_factory=list)  # true SoC at the start of each step


def _fmt(x: float) -> float:
    return float(x)


def run_closed_loop(data: ScenarioData, steps: int, predictor_window: float = 300.0,
                    dump_dir: Path | None = None, keep_decisions: bool = False) -> RunResult:
    """Receding-horizon control of the plant with moving-average predictions."""
    top, cfg = data.topology, data.mpc
    batt = top.vsc_indices("battery")
    names = [v.name for v in top.vscs]
    bnames = [names[i] for i in batt]
    ctx = MpcContext(top, data.packs, data.eff_poly)
    cache = GainCache(top, cfg.v_ll, cfg.load_quantum)
    plant_state = initial_state(top, data.packs, cfg.v_ll)
    state = MpcState(soc=plant_state.soc.copy())
    pv_pred = Predictor(predictor_window, cfg.t_s)
    load_pred = Predictor(predictor_window, cfg.t_s)
    # cold start: the current measurement stands in for the missing history
    pv_pred.observe(data.pv_true[0])
    load_pred.observe(data.load_true[0])

    rows, timing, decisions, soc_start = [], [], [], []
    meas_dict: dict = {}
    for k in range(steps):
        pred = Predictions(p_mpp=predict(pv_pred, cfg.n_p), p_cpl=np.zeros((cfg.n_p, 0)),
                           load_p=predict(load_pred, cfg.n_p))
        attach_gains(pred, cache)
        t0 = time.perf_counter()
        dump = None if dump_dir is None else Path(dump_dir) / f"step_{k:04d}.qcqp"
        decision, state = mpc_step(state, meas_dict, pred, cfg, ctx, dump_path=dump)
        step_time = time.perf_counter() - t0
        soc_start.append(plant_state.soc.copy())
        plant_state, meas = plant_step(plant_state, top, data.packs, decision.v_ref,
                                       data.pv_true[k], data.load_true[k], data.plant)
        meas_dict = meas.as_dict()
        pv_pred.observe(data.pv_true[k])
        load_pred.observe(data.load_true[k])
        if keep_decisions:
            decisions.append(decision)

        comp = np.minimum(decision.p_ch[:, batt], decision.p_dis[:, batt])
        row = {"step": k, "t_s": _fmt(k * cfg.t_s)}
        for j, n in enumerate(bnames):
            row[f"soc_{n}"] = _fmt(meas.soc[j])
        for j, i in enumerate(batt):
            row[f"p_batt_kw_{bnames[j]}"] = _fmt(meas.p_vsc[i] / 1e3)
        for i, n in enumerate(names):
            row[f"q_kvar_{n}"] = _fmt(meas.q_vsc[i] / 1e3)
        for i, n in enumerate(names):
            row[f"i_rms_a_{n}"] = _fmt(meas.i_rms[i])
        for i, n in enumerate(names):
            row[f"v_rms_pu_{n}"] = _fmt(meas.v_rms_pu[i])
        row.update({
            "pv_kw": _fmt(meas.pv_power / 1e3),
            "pv_mpp_kw": _fmt(float(np.sum(data.pv_true[k])) / 1e3),
            "load_kw": _fmt(meas.load_power / 1e3),
            "line_loss_kw": _fmt(meas.line_loss / 1e3),
            "filter_loss_kw": _fmt(meas.filter_loss / 1e3),
            "battery_loss_kw": _fmt(meas.battery_loss / 1e3),
            "losses_kw": _fmt(meas.total_loss / 1e3),
            "audit_residual": _fmt(meas.audit_residual),
            "complementarity_w": _fmt(float(comp.max(initial=0.0))),
            "solver_status": decision.diagnostics["status"],
            "solver_iterations": decision.diagnostics["iterations"],
            "alarm": int(decision.diagnostics["alarm"]),
            "battery_saturated": int(meas.saturated.any()),
            "pv_clamped": int(meas.pv_clamped),
        })
        rows.append(row)
        timing.append({"step": k, "solve_time_s": decision.diagnostics["solve_time"],
                       "step_time_s": step_time})
        if k % 50 == 0:
            log.info("step %d: loss %.2f kW, soc %s, %s in %.2fs", k, row["losses_kw"],
                     np.round(meas.soc, 3), decision.diagnostics["status"], step_time)
    return RunResult(rows, timing, summarize(rows, bnames, names), decisions,
                     data.pv_true[:steps], data.load_true[:steps], soc_start)


def summarize(rows: list, battery_names, vsc_names) -> dict:
    """Summary statistics computed only from trajectory rows."""
    def col(name):
        return np.array([r[name] for r in rows], dtype=float)

    soc = np.array([[r[f"soc_{n}"] for n in battery_names] for r in rows])
    i_rms = np.array([[r[f"i_rms_a_{n}"] for n in vsc_names] for r in rows])
    v_rms = np.array([[r[f"v_rms_pu_{n}"] for n in vsc_names] for r in rows])
    return {
        "steps": len(rows),
        "average_loss_kw": float(col("losses_kw").mean()),
        "average_network_loss_kw": float((col("line_loss_kw") + col("filter_loss_kw")).mean()),
        "average_battery_loss_kw": float(col("battery_loss_kw").mean()),
        "min_soc": float(soc.min()),
        "max_soc": float(soc.max()),
        "max_avg_phase_current_a": float(i_rms.max()),
        "v_min_pu": float(v_rms.min()),
        "v_max_pu": float(v_rms.max()),
        "max_audit_residual": float(col("audit_residual").max()),
        "max_complementarity_w": float(col("complementarity_w").max()),
        "alarms": int(col("alarm").sum()),
        "non_optimal_solves": int(sum(r["solver_status"] != "optimal" for r in rows)),
    }


def timing_summary(timing: list) -> dict:
    st = np.array([t["solve_time_s"] for t in timing])
    return {"mean_solve_time_s": float(st.mean()), "max_solve_time_s": float(st.max()),
            "mean_step_time_s": float(np.mean([t["step_time_s"] for t in timing]))}


def run_scenario(cfg: ScenarioConfig, dump_dir=None, keep_decisions: bool = False) -> tuple[RunResult, ScenarioData]:
    data = prepare(cfg)
    res = run_closed_loop(data, cfg.steps, cfg.predictor_window, dump_dir, keep_decisions)
    return res, data
