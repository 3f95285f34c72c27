"""Command-line entry points: simulate, pipeline, suite, eval."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .errors import NlosRadarError, ScenarioError
from .evaluation import evaluate
from .pipeline import STAGES, RunConfig, RunDir, load_sequence, run_pipeline, run_suite, write_report
from .scene import load_scenario
from .suite import default_suite, demo_scenario_path, write_suite

log = logging.getLogger("nlos_radar")


def _stages(text):
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in names if s not in STAGES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown stage(s) {bad}; choose from {','.join(STAGES)}")
    return names


def _add_run_flags(p, velocity=True):
    p.add_argument("--scenario", type=Path, default=None, help="scenario YAML (default: bundled demo)")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--frames", type=int, default=None, help="simulate only the first N frames")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--suppress-static", action="store_true", help="drop zero-Doppler CFAR cells")
    if velocity:
        p.add_argument("--no-velocity", action="store_true", help="tracker without velocity fusion (w/o v)")
        p.add_argument("--split-visibility", action="store_true", help="separate NLOS/LOS metric rows")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlos-radar", description="Doppler radar NLOS simulation and tracking")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write point clouds, lidar scans and ground truth")
    _add_run_flags(p, velocity=False)
    p.add_argument("--dump-raw", action="store_true", help="also write raw ADC frames")

    p = sub.add_parser("pipeline", help="simulate, detect, track and evaluate one scenario")
    _add_run_flags(p)
    p.add_argument("--stages", type=_stages, default=STAGES, help="comma-separated subset of " + ",".join(STAGES))
    p.add_argument("--input", type=Path, default=None, help="earlier run supplying inputs of skipped stages")
    p.add_argument("--plots", choices=("frames", "overview", "none"), default="frames")

    p = sub.add_parser("suite", help="emit the shipped scenario suite, optionally run it")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--run", action="store_true", help="run every scenario and pool the metrics")
    p.add_argument("--no-velocity", action="store_true")
    p.add_argument("--split-visibility", action="store_true")
    p.add_argument("--suppress-static", action="store_true")
    p.add_argument("--reuse", type=Path, default=None, help="earlier suite run whose detections are re-tracked")
    p.add_argument("--jobs", type=int, default=1, help="scenario worker processes")
    p.add_argument("--plots", choices=("frames", "overview", "none"), default="none")

    p = sub.add_parser("eval", help="(re)compute metrics for finished runs")
    p.add_argument("--input", type=Path, nargs="+", required=True, help="run directories holding tracks.ndjson")
    p.add_argument("--out", type=Path, default=None, help="report directory (default: the single input)")
    p.add_argument("--split-visibility", action="store_true")
    p.add_argument("--no-velocity", action="store_true", help="tag the report w/o v")
    return parser


def _scenario_path(args) -> Path:
    return args.scenario if args.scenario is not None else demo_scenario_path()


def cmd_simulate(args) -> dict:
    cfg = RunConfig(out=args.out, scenario_path=_scenario_path(args), seed=args.seed, frames=args.frames,
                    suppress_static=args.suppress_static, stages=("simulate",), plots="none",
                    dump_raw=args.dump_raw)
    run_pipeline(cfg)
    manifest = json.loads((args.out / "manifest.json").read_text())
    return {"out": str(args.out), "frames": manifest["num_frames"], "warnings": manifest["warnings"]}


def cmd_pipeline(args) -> dict:
    needs_scenario = "simulate" in args.stages
    cfg = RunConfig(out=args.out, scenario_path=_scenario_path(args) if needs_scenario else None,
                    input_dir=args.input, seed=args.seed, frames=args.frames, suppress_static=args.suppress_static,
                    use_velocity=not args.no_velocity, split_visibility=args.split_visibility,
                    stages=args.stages, plots=args.plots)
    rep = run_pipeline(cfg)
    return {"out": str(args.out), "tag": cfg.tag, **({"mota": rep.mota, "motp": rep.motp} if rep else {})}


def cmd_suite(args) -> dict:
    paths = write_suite(args.out / "scenarios")
    res = {"scenarios": [str(p) for p in paths]}
    if args.run:
        rep = run_suite(default_suite(), args.out / "runs", use_velocity=not args.no_velocity,
                        split_visibility=args.split_visibility, plots=args.plots, reuse=args.reuse,
                        jobs=args.jobs, suppress_static=args.suppress_static)
        res.update(tag=rep.tag, mota=rep.mota, splits={k: v["mota"] for k, v in rep.splits.items()})
    return res


def cmd_eval(args) -> dict:
    seqs = [load_sequence(RunDir(d)) for d in args.input]
    rep = evaluate(seqs, tag="w/o v" if args.no_velocity else "w/ v",
                   name=seqs[0].name if len(seqs) == 1 else "pooled")
    out = args.out if args.out is not None else args.input[0]
    if args.out is None and len(args.input) > 1:
        raise NlosRadarError("--out is required when evaluating several runs")
    write_report(rep, out, args.split_visibility)
    return {"out": str(out), "mota": rep.mota, "motp": rep.motp}


COMMANDS = {"simulate": cmd_simulate, "pipeline": cmd_pipeline, "suite": cmd_suite, "eval": cmd_eval}


def _error_record(exc) -> dict:
    if isinstance(exc, ScenarioError):
        return exc.to_record()
    return {"error": type(exc).__name__, "message": str(exc)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = COMMANDS[args.command](args)
    except (NlosRadarError, OSError, yaml.YAMLError) as exc:
        print(json.dumps(_error_record(exc)), file=sys.stderr)
        return 2
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
