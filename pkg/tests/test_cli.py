import csv
import math
import shutil

import numpy as np
import pytest
import yaml

from microgrid_mpc import cli
from microgrid_mpc.scenario import DATA_DIR, bundled_scenario

STEPS = "4"


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def zero_scenario(tmp_path):
    """Bundled scenario with no sunlight and no load."""
    raw = yaml.safe_load(bundled_scenario().read_text())
    n = 40
    (tmp_path / "dark.csv").write_text("t_s,irradiance_wm2,temp_c\n"
                                       + "".join(f"{60 * k},0.000,20.000\n" for k in range(n)))
    (tmp_path / "idle.csv").write_text("t_s,total_kw\n" + "".join(f"{60 * k},0.000000\n" for k in range(n)))
    shutil.copy(DATA_DIR / "ieee13.yaml", tmp_path / "ieee13.yaml")
    raw.update(weather="dark.csv", load="idle.csv", topology="ieee13.yaml")
    p = tmp_path / "zero.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


@pytest.fixture(scope="module")
def short_output(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["run", "--output", str(out), "--steps", STEPS]) == cli.EXIT_OK
    return out


def test_run_writes_reports(short_output):
    for name in ("trajectory.csv", "summary.csv", "timing.csv", "timing_summary.csv"):
        assert (short_output / name).is_file()
    summary = cli.read_metrics(short_output / "summary.csv")
    for key in ("average_loss_kw", "min_soc", "max_soc", "max_avg_phase_current_a", "v_min_pu", "v_max_pu"):
        assert key in summary
    assert "mean_solve_time_s" in cli.read_metrics(short_output / "timing_summary.csv")
    assert len(_read(short_output / "trajectory.csv")) == int(STEPS)


def test_repeated_runs_byte_identical(short_output, tmp_path):
    assert cli.main(["run", "--output", str(tmp_path), "--steps", STEPS]) == cli.EXIT_OK
    for name in ("trajectory.csv", "summary.csv"):
        assert (tmp_path / name).read_bytes() == (short_output / name).read_bytes()


def test_summary_recomputable_from_trajectory_csv(short_output):
    rows = _read(short_output / "trajectory.csv")
    summary = cli.read_metrics(short_output / "summary.csv")
    col = lambda prefix: np.array([[float(v) for k, v in r.items() if k.startswith(prefix)] for r in rows])  # noqa: E731
    assert summary["average_loss_kw"] == pytest.approx(col("losses_kw").mean(), rel=1e-12)
    assert summary["min_soc"] == pytest.approx(col("soc_").min(), rel=1e-12)
    assert summary["max_soc"] == pytest.approx(col("soc_").max(), rel=1e-12)
    assert summary["max_avg_phase_current_a"] == pytest.approx(col("i_rms_a_").max(), rel=1e-12)
    assert summary["v_min_pu"] == pytest.approx(col("v_rms_pu_").min(), rel=1e-12)
    assert summary["v_max_pu"] == pytest.approx(col("v_rms_pu_").max(), rel=1e-12)
    assert summary["alarms"] == sum(int(r["alarm"]) for r in rows)


def test_zero_demand_sits_on_filter_floor(zero_scenario, tmp_path):
    assert cli.main(["run", "--scenario", str(zero_scenario), "--output", str(tmp_path), "--steps", "1"]) == 0
    row = _read(tmp_path / "trajectory.csv")[0]
    # with no load the converters only feed their own filter capacitors; at the
    # 0.9 pu floor each draws i = w*C_f*V through r_f (d-q magnitudes)
    v_floor = 0.9 * 415.0
    per_vsc = 0.15 * (2 * math.pi * 50 * 680e-6 * v_floor) ** 2
    floor_kw = 5 * per_vsc / 1e3
    assert floor_kw == pytest.approx(4.775, abs=1e-3)
    assert float(row["load_kw"]) == pytest.approx(0.0, abs=1e-9)
    # the dark PV converter cannot pull its reference below the 0.9 pu floor to
    # import its own filter loss, so the plant flags the clamp and it supplies a little
    assert int(row["pv_clamped"]) == 1
    assert 0.0 <= float(row["pv_kw"]) < 0.05 * floor_kw
    assert float(row["filter_loss_kw"]) == pytest.approx(floor_kw, rel=0.02)
    assert float(row["line_loss_kw"]) < 0.01 * floor_kw
    assert float(row["losses_kw"]) < 1.05 * floor_kw


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology: nowhere.yaml\n")
    assert cli.main(["run", "--scenario", str(bad), "--output", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli, "run_closed_loop", boom)
    assert cli.main(["run", "--output", str(tmp_path), "--steps", "1"]) == cli.EXIT_RUNTIME
    assert "solver exploded" in capsys.readouterr().err


def test_bad_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--mode", "fastest"])
    assert exc.value.code != 0


def test_dump_problems(tmp_path):
    from microgrid_mpc.qcqp.io import load

    assert cli.main(["run", "--output", str(tmp_path), "--steps", "2", "--dump-problems"]) == 0
    files = sorted((tmp_path / "problems").glob("*.qcqp"))
    assert [f.name for f in files] == ["step_0000.qcqp", "step_0001.qcqp"]
    assert load(files[0]).n > 0


def test_gap_subcommand(short_output, tmp_path):
    assert cli.main(["gap", "--output", str(tmp_path), "--trajectory", str(short_output / "trajectory.csv"),
                     "--steps", STEPS]) == 0
    gap = cli.read_metrics(tmp_path / "gap.csv")
    assert gap["convex_average_loss_kw"] == pytest.approx(cli.read_trajectory_loss(short_output / "trajectory.csv"))
    assert gap["windows"] == 1
    assert gap["gap"] == pytest.approx(1 - gap["nonconvex_average_loss_kw"] / gap["convex_average_loss_kw"])
    assert "time_ratio" in cli.read_metrics(tmp_path / "gap_timing.csv")


def test_gap_without_trajectory(tmp_path):
    assert cli.main(["gap", "--output", str(tmp_path)]) == cli.EXIT_CONFIG
