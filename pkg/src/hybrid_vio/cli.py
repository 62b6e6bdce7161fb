"""Command-line entry point: ``run``, ``simulate`` and ``evaluate``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 estimator failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import MODES, PipelineConfig, config_to_dict, load_config, with_overrides
from .dataset_io import load_dataset, read_trajectory, save_dataset, write_trajectory
from .errors import ConfigError, DataError, EstimatorError, HybridVioError
from .evaluation import AlignmentSpec, evaluate, write_outputs
from .pipeline import DIAGNOSTIC_FIELDS, run
from .simulator import scenario, scenario_from_dict, scenario_to_dict, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ESTIMATOR = 4

log = logging.getLogger("hybrid_vio")


def _format_cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return f"{v:.9g}"
    return v


def write_diagnostics_csv(path, diagnostics):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_FIELDS)
        for d in diagnostics:
            w.writerow([_format_cell(v) for v in d.row()])


def cmd_run(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg = with_overrides(cfg, mode=args.mode, seed=args.seed, single_activity=True if args.single_activity else None)
    dataset_dir = Path(args.dataset)
    # events feed the no-motion gate even when they are not tracked
    need_events = cfg.uses_events or (dataset_dir / "events.txt").exists()
    dataset = load_dataset(dataset_dir, need_events=need_events, need_frames=cfg.uses_frames)
    result = run(dataset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.txt", result.trajectory)
    write_diagnostics_csv(out / "diagnostics.csv", result.diagnostics)
    summary = dict(result.summary, dataset=str(dataset_dir), config=config_to_dict(cfg))
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    print(f"wrote {len(result.trajectory)} poses to {out / 'trajectory.txt'}")
    return EXIT_OK


def _load_scenario(args):
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {args.config}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed scenario {args.config}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError("scenario file must hold a mapping")
        sc = scenario_from_dict(data)
    else:
        sc = scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    if args.duration is not None:
        if args.duration <= 0:
            raise ConfigError("duration must be positive")
        sc.trajectory.duration = args.duration
    return sc


def cmd_simulate(args):
    sc = _load_scenario(args)
    dataset = simulate(sc)
    out = Path(args.out)
    save_dataset(out, dataset)
    with open(out / "scenario.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(sc), fh, sort_keys=True)
    print(f"wrote {sc.name} scenario ({sc.trajectory.duration:g} s, seed {sc.seed}) to {out}")
    return EXIT_OK


def cmd_evaluate(args):
    est = read_trajectory(args.estimate)
    gt = read_trajectory(args.groundtruth)
    try:
        spec = AlignmentSpec(args.align_start, args.align_end)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = evaluate(est, gt, spec)
    write_outputs(args.out, report)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="hybrid-vio", description="Event, frame and inertial odometry.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the estimator on a dataset directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--mode", choices=sorted(MODES), help="sensor combination")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--single-activity", action="store_true", help="run frontends sequentially (deterministic)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="YAML scenario description")
    p.add_argument("--scenario", default="circle", choices=("circle", "blackout", "hover", "static"))
    p.add_argument("--duration", type=float, help="override the trajectory duration in seconds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score an estimated trajectory against ground truth")
    p.add_argument("--estimate", required=True, help="estimated trajectory file")
    p.add_argument("--groundtruth", required=True, help="ground-truth trajectory file")
    p.add_argument("--out", required=True, help="output directory for metrics.json and segments.csv")
    p.add_argument("--align-start", type=float, default=AlignmentSpec.t_start)
    p.add_argument("--align-end", type=float, default=AlignmentSpec.t_end)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimatorError, HybridVioError) as exc:
        print(f"estimator failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
