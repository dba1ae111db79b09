"""Command line front end.

``microgrid-mpc run`` executes the closed loop and writes CSV reports;
``microgrid-mpc gap`` evaluates a recorded run against the non-convex
windowed oracle. Exit codes: 0 success, 1 configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .scenario import ConfigError, bundled_scenario, load_scenario, prepare, run_closed_loop, timing_summary

log = logging.getLogger("microgrid_mpc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def write_rows(path: Path, rows: list) -> None:
    if not rows:
        raise ValueError(f"no rows for {path}")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_metrics(path: Path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, v])


def read_metrics(path: Path) -> dict:
    with open(path, newline="") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}


def read_trajectory_loss(path: Path) -> float:
    with open(path, newline="") as fh:
        losses = [float(r["losses_kw"]) for r in csv.DictReader(fh)]
    if not losses:
        raise ValueError(f"{path} has no rows")
    return float(np.mean(losses))


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microgrid-mpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", type=Path, default=None,
                       help="scenario YAML (default: bundled IEEE-13 scenario)")
        p.add_argument("--output", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--steps", type=int, default=None, help="number of one-minute steps")
        p.add_argument("--seed", type=int, default=None, help="load random-walk seed")
        p.add_argument("--mode", choices=["variable_eff", "constant_eff"], default=None)

    run = sub.add_parser("run", help="run the controller-plant loop")
    common(run)
    run.add_argument("--oracle", action="store_true", default=None,
                     help="also solve the non-convex windowed problem and write gap.csv")
    run.add_argument("--dump-problems", action="store_true",
                     help="write every per-step QCQP to OUTPUT/problems/")

    gap = sub.add_parser("gap", help="gap report for a recorded run")
    common(gap)
    gap.add_argument("--trajectory", type=Path, default=None,
                     help="recorded trajectory.csv (default: OUTPUT/trajectory.csv)")
    return ap


def _oracle_report(data, steps: int, convex_loss_kw: float, convex_step_time: float | None):
    from .oracle import gap_report, run_windowed

    res = run_windowed(data, steps)
    perfect = run_windowed(data, steps, solve_nonconvex=False)
    metrics = {
        "convex_average_loss_kw": convex_loss_kw,
        "nonconvex_average_loss_kw": res.average_loss_kw,
        "gap": gap_report(convex_loss_kw, res.average_loss_kw),
        "convex_perfect_average_loss_kw": perfect.average_loss_kw,
        "gap_same_inputs": gap_report(perfect.average_loss_kw, res.average_loss_kw),
        "windows": len(res.windows),
        "windows_converged": sum(w["local_status"] == "converged" for w in res.windows),
        "max_eq_residual": max(w["eq_residual"] for w in res.windows),
        "max_lower_violation": max(w["lower_violation"] for w in res.windows),
    }
    times = {"mean_nonconvex_window_time_s": float(np.mean([w["window_time_s"] for w in res.windows]))}
    if convex_step_time:
        times["time_ratio"] = times["mean_nonconvex_window_time_s"] / convex_step_time
    return metrics, times, res


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario or bundled_scenario(), steps=args.steps, seed=args.seed,
                        mode=args.mode, oracle=args.oracle)
    data = prepare(cfg)
    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    dump_dir = None
    if args.dump_problems:
        dump_dir = out / "problems"
        dump_dir.mkdir(exist_ok=True)
    res = run_closed_loop(data, cfg.steps, cfg.predictor_window, dump_dir)
    write_rows(out / "trajectory.csv", res.trajectory)
    write_metrics(out / "summary.csv", res.summary)
    write_rows(out / "timing.csv", res.timing)
    timing = timing_summary(res.timing)
    if cfg.oracle:
        metrics, times, _ = _oracle_report(data, cfg.steps, res.summary["average_loss_kw"],
                                           timing["mean_solve_time_s"])
        write_metrics(out / "gap.csv", metrics)
        timing.update(times)
        log.info("gap %.4f, time ratio %.1f", metrics["gap"], times.get("time_ratio", float("nan")))
    write_metrics(out / "timing_summary.csv", timing)
    s = res.summary
    print(f"average loss {s['average_loss_kw']:.3f} kW, SoC [{s['min_soc']:.4f}, {s['max_soc']:.4f}], "
          f"max current {s['max_avg_phase_current_a']:.1f} A, alarms {s['alarms']}; wrote {out}")
    return EXIT_OK


def cmd_gap(args) -> int:
    cfg = load_scenario(args.scenario or bundled_scenario(), steps=args.steps, seed=args.seed, mode=args.mode)
    traj = args.trajectory or args.output / "trajectory.csv"
    if not Path(traj).is_file():
        raise ConfigError(f"recorded trajectory not found: {traj}")
    with open(traj, newline="") as fh:
        n_rows = sum(1 for _ in csv.DictReader(fh))
    steps = min(cfg.steps, n_rows)
    convex_loss = read_trajectory_loss(traj)
    data = prepare(cfg)
    step_time = None
    tpath = Path(traj).parent / "timing.csv"
    if tpath.is_file():
        with open(tpath, newline="") as fh:
            step_time = float(np.mean([float(r["solve_time_s"]) for r in csv.DictReader(fh)]))
    metrics, times, _ = _oracle_report(data, steps, convex_loss, step_time)
    args.output.mkdir(parents=True, exist_ok=True)
    write_metrics(args.output / "gap.csv", metrics)
    write_metrics(args.output / "gap_timing.csv", times)
    print(f"gap {metrics['gap']:.4f} (convex {convex_loss:.3f} kW, non-convex "
          f"{metrics['nonconvex_average_loss_kw']:.3f} kW)")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "gap": cmd_gap}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
