"""File-based simulate -> DSP -> reconstruct -> detect -> track -> evaluate runs.

Each stage reads the previous stage's files from the run directory, so a
fused run and a run assembled from separately invoked stages produce the
same bytes. Floats are written with ``repr`` and survive the round trip.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import shutil
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .detection import DetectorParams, EXTENDED_FIELDS, box_from_record, detect
from .dsp import cfar_detect, range_doppler_angle_transform, read_pointcloud_csv, write_pointcloud_csv
from .errors import MissingInputError
from .evaluation import FrameGroundTruth, MetricsReport, Sequence, evaluate, ground_truth
from .geometry import (LidarBev, cloud_from_records, estimate_walls, read_lidar_csv, read_walls_csv,
                       reconstruct_cloud, reconstruction_records, write_lidar_csv, write_ndjson, write_walls_csv)
from .scene import Scenario, dump_scenario, load_scenario
from .simulator import frame_rng, sample_lidar, synthesize_frame, write_raw_frame
from .tracking import Tracker, TrackerParams, box_records

log = logging.getLogger(__name__)

STAGES = ("simulate", "walls", "reconstruct", "detect", "track", "evaluate", "plot")
FRAME_BUDGET_S = 22.6e-3


@dataclass
class RunConfig:
    out: Path
    scenario_path: Path | None = None
    input_dir: Path | None = None      # earlier run whose files feed missing stage inputs
    seed: int | None = None
    frames: int | None = None
    suppress_static: bool = False
    use_velocity: bool = True
    split_visibility: bool = False
    stages: tuple = STAGES
    plots: str = "frames"              # frames | overview | none
    pfa: float = 1e-6
    dump_raw: bool = False
    detector: DetectorParams = field(default_factory=DetectorParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)

    @property
    def tag(self) -> str:
        return "w/ v" if self.use_velocity else "w/o v"


class RunDir:
    """Path helper that falls back to an input run for files it lacks."""

    def __init__(self, out, fallback=None):
        self.out = Path(out)
        self.fallback = Path(fallback) if fallback is not None else None

    def write(self, name) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def read(self, name) -> Path:
        for base in (self.out, self.fallback):
            if base is not None and (base / name).exists():
                return base / name
        raise MissingInputError(f"missing stage input {name!r} in {self.out}"
                                + (f" or {self.fallback}" if self.fallback else ""))


def _frame_name(kind, k, ext="csv"):
    return f"{kind}/frame_{k:04d}.{ext}"


def _read_ndjson(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _group(records, n_frames):
    out = [[] for _ in range(n_frames)]
    for r in records:
        out[r["frame"]].append(r)
    return out


def prepare_scenario(scenario: Scenario, seed=None, frames=None) -> Scenario:
    kw = {}
    if seed is not None:
        kw["rng_seed"] = int(seed)
    if frames is not None:
        kw["num_frames"] = max(1, min(int(frames), scenario.num_frames))
    return dataclasses.replace(scenario, **kw) if kw else scenario


# --------------------------------------------------------------------------
# stages

def stage_simulate(scenario: Scenario, rd: RunDir, cfg: RunConfig) -> dict:
    """Synthesize, transform and CFAR every frame; write clouds, lidar and ground truth."""
    warnings = scenario.occlusion_warnings()
    for w in warnings:
        log.warning("%s: %s", scenario.name, w)
    dump_scenario(scenario, rd.write("scenario.yaml"))
    t_synth, t_fft, t_cfar = [], [], []
    counts = []
    for k in range(scenario.num_frames):
        t = scenario.frame_time(k)
        t0 = time.perf_counter()
        raw = synthesize_frame(scenario, k)
        t1 = time.perf_counter()
        cube = range_doppler_angle_transform(raw, scenario.sensor)
        t2 = time.perf_counter()
        pc = cfar_detect(cube, pfa=cfg.pfa, suppress_static=cfg.suppress_static)
        pc.timestamp = t
        t3 = time.perf_counter()
        t_synth.append(t1 - t0)
        t_fft.append(t2 - t1)
        t_cfar.append(t3 - t2)
        counts.append(len(pc))
        write_pointcloud_csv(rd.write(_frame_name("pointclouds", k)), pc)
        if cfg.dump_raw:
            write_raw_frame(rd.write(_frame_name("raw", k, "bin")), raw, scenario.config_hash())
        lidar_rng = frame_rng(scenario, k)[2]
        write_lidar_csv(rd.write(_frame_name("lidar", k)), LidarBev(sample_lidar(scenario, t, lidar_rng)))
    write_ndjson(rd.write("ground_truth.ndjson"), [g.to_record() for g in ground_truth(scenario)])
    manifest = {
        "scenario": scenario.name,
        "config_hash": scenario.config_hash(),
        "seed": scenario.rng_seed,
        "num_frames": scenario.num_frames,
        "frame_interval": scenario.frame_interval,
        "suppress_static": cfg.suppress_static,
        "pfa": cfg.pfa,
        "point_counts": counts,
        "warnings": warnings,
        "files": {
            "scenario": "scenario.yaml",
            "pointclouds": [_frame_name("pointclouds", k) for k in range(scenario.num_frames)],
            "lidar": [_frame_name("lidar", k) for k in range(scenario.num_frames)],
            "ground_truth": "ground_truth.ndjson",
        },
    }
    rd.write("manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    timing = {"synthesis_ms": 1e3 * float(np.mean(t_synth)), "transform_ms": 1e3 * float(np.mean(t_fft)),
              "cfar_ms": 1e3 * float(np.mean(t_cfar))}
    timing["dsp_ms"] = timing["transform_ms"] + timing["cfar_ms"]
    timing["budget_factor"] = timing["dsp_ms"] / (1e3 * FRAME_BUDGET_S)
    log.info("%s: transform %.1f ms + cfar %.1f ms per frame (%.1fx the %.1f ms frame budget)", scenario.name,
             timing["transform_ms"], timing["cfar_ms"], timing["budget_factor"], 1e3 * FRAME_BUDGET_S)
    return timing


def _load_run(rd: RunDir):
    manifest = json.loads(rd.read("manifest.json").read_text())
    scenario = load_scenario(rd.read("scenario.yaml"))
    return manifest, scenario


def stage_walls(rd: RunDir, cfg: RunConfig):
    manifest, scenario = _load_run(rd)
    for k in range(manifest["num_frames"]):
        bev = read_lidar_csv(rd.read(_frame_name("lidar", k)))
        c = scenario.sensor_pose_at(scenario.frame_time(k)).position
        write_walls_csv(rd.write(_frame_name("walls", k)), estimate_walls(bev, c))


def stage_reconstruct(rd: RunDir, cfg: RunConfig):
    manifest, scenario = _load_run(rd)
    recs = []
    for k in range(manifest["num_frames"]):
        pc = read_pointcloud_csv(rd.read(_frame_name("pointclouds", k)))
        pc.timestamp = scenario.frame_time(k)
        walls = read_walls_csv(rd.read(_frame_name("walls", k)))
        pose = scenario.sensor_pose_at(scenario.frame_time(k))
        recs += reconstruction_records(k, reconstruct_cloud(pc, pose, walls, scenario.ego_velocity))
    write_ndjson(rd.write("reconstructions.ndjson"), recs)


def stage_detect(rd: RunDir, cfg: RunConfig):
    manifest, _ = _load_run(rd)
    frames = _group(_read_ndjson(rd.read("reconstructions.ndjson")), manifest["num_frames"])
    out = []
    for k, recs in enumerate(frames):
        for b in detect(cloud_from_records(recs), cfg.detector):
            out.append(b.to_record(k, extended=True))
    write_ndjson(rd.write("detections.ndjson"), [{f: r[f] for f in EXTENDED_FIELDS} for r in out])


def stage_track(rd: RunDir, cfg: RunConfig):
    manifest, scenario = _load_run(rd)
    dets = _group(_read_ndjson(rd.read("detections.ndjson")), manifest["num_frames"])
    params = dataclasses.replace(cfg.tracker, use_velocity=cfg.use_velocity)
    tracker = Tracker(params)
    out = []
    for k, recs in enumerate(dets):
        boxes = tracker.step([box_from_record(r) for r in recs], scenario.frame_time(k))
        out += box_records(k, boxes)
    write_ndjson(rd.write("tracks.ndjson"), out)


def load_sequence(rd: RunDir, name: str = "") -> Sequence:
    manifest, _ = _load_run(rd)
    n = manifest["num_frames"]
    gts = [FrameGroundTruth.from_record(r) for r in _read_ndjson(rd.read("ground_truth.ndjson"))]
    dets = [[box_from_record(r) for r in f] for f in _group(_read_ndjson(rd.read("detections.ndjson")), n)]
    trks = [[box_from_record(r) for r in f] for f in _group(_read_ndjson(rd.read("tracks.ndjson")), n)]
    return Sequence(dets, trks, gts, name or manifest["scenario"])


def stage_evaluate(rd: RunDir, cfg: RunConfig) -> MetricsReport:
    seq = load_sequence(rd)
    rep = evaluate(seq, tag=cfg.tag, name=seq.name)
    write_report(rep, rd.out, cfg.split_visibility)
    return rep


def write_report(rep: MetricsReport, out_dir, split_visibility=False, stem="metrics"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(rep.to_json())
    (out / f"{stem}.md").write_text(rep.to_markdown(split_visibility))


def stage_plot(rd: RunDir, cfg: RunConfig):
    if cfg.plots == "none":
        return
    manifest, scenario = _load_run(rd)
    seq = load_sequence(rd)
    n = manifest["num_frames"]
    walls0 = read_walls_csv(rd.read(_frame_name("walls", 0)))
    c = scenario.pose.position
    plotting.plot_tracks_overview(rd.write("plots/overview.png"), walls=walls0, tracks_per_frame=seq.tracks,
                                  ground_truth=seq.ground_truth, sensor=c, title=f"{scenario.name} ({cfg.tag})")
    if cfg.plots != "frames":
        return
    recs = _group(_read_ndjson(rd.read("reconstructions.ndjson")), n)
    pts = np.array([[r["x"], r["y"]] for f in recs for r in f] + [[0.0, 0.0]])
    extent = (min(pts[:, 0].min(), 0) - 2, pts[:, 0].max() + 2, pts[:, 1].min() - 2, pts[:, 1].max() + 2)
    for k in range(n):
        plotting.plot_bev_frame(rd.write(_frame_name("plots", k, "png")),
                                walls=read_walls_csv(rd.read(_frame_name("walls", k))),
                                cloud=cloud_from_records(recs[k]), detections=seq.detections[k],
                                tracks=seq.tracks[k], ground_truth=seq.ground_truth[k].boxes,
                                sensor=scenario.sensor_pose_at(scenario.frame_time(k)).position,
                                title=f"{scenario.name} frame {k}", extent=extent)


# --------------------------------------------------------------------------
# drivers

def run_pipeline(cfg: RunConfig, scenario: Scenario | None = None) -> MetricsReport | None:
    """Run the requested stages into ``cfg.out``; returns the report when evaluated."""
    rd = RunDir(cfg.out, cfg.input_dir)
    rd.out.mkdir(parents=True, exist_ok=True)
    timing = {}
    rep = None
    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        t0 = time.perf_counter()
        if stage == "simulate":
            if scenario is None:
                if cfg.scenario_path is None:
                    raise MissingInputError("simulate stage needs a scenario")
                scenario = load_scenario(cfg.scenario_path)
            scenario = prepare_scenario(scenario, cfg.seed, cfg.frames)
            timing["per_frame"] = stage_simulate(scenario, rd, cfg)
        elif stage == "evaluate":
            rep = stage_evaluate(rd, cfg)
        else:
            globals()[f"stage_{stage}"](rd, cfg)
        timing[stage] = time.perf_counter() - t0
        log.info("stage %s: %.2f s", stage, timing[stage])
    rd.write("run_config.json").write_text(json.dumps(
        {"tag": cfg.tag, "use_velocity": cfg.use_velocity, "suppress_static": cfg.suppress_static,
         "seed": cfg.seed, "frames": cfg.frames, "stages": list(cfg.stages),
         "split_visibility": cfg.split_visibility}, indent=2) + "\n")
    rd.write("timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return rep


def _suite_member(s: Scenario, sub: Path, reuse, kw) -> Sequence:
    stages = ("track", "evaluate", "plot") if reuse is not None else STAGES
    cfg = RunConfig(out=sub, input_dir=None if reuse is None else Path(reuse) / s.name, stages=stages, **kw)
    if reuse is not None:
        sub.mkdir(parents=True, exist_ok=True)
        for name in ("manifest.json", "scenario.yaml"):
            shutil.copyfile(Path(reuse) / s.name / name, sub / name)
    run_pipeline(cfg, s)
    return load_sequence(RunDir(sub, cfg.input_dir), s.name)


def run_suite(scenarios, out_dir, use_velocity=True, split_visibility=True, plots="none", reuse=None, jobs=1,
              **kw) -> MetricsReport:
    """Run each scenario into ``out_dir/<name>`` and pool the metrics.

    With ``reuse`` (an earlier suite directory) only tracking and evaluation
    run again, on the earlier detections. ``jobs > 1`` runs scenarios in
    worker processes; pooling order stays the scenario order.
    """
    out = Path(out_dir)
    kw = dict(kw, use_velocity=use_velocity, split_visibility=split_visibility, plots=plots)
    args = [(s, out / s.name, reuse, kw) for s in scenarios]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            seqs = list(ex.map(_suite_member, *zip(*args)))
    else:
        seqs = [_suite_member(*a) for a in args]
    tag = "w/ v" if use_velocity else "w/o v"
    rep = evaluate(seqs, tag=tag, name="suite")
    write_report(rep, out, split_visibility, stem="suite_metrics")
    return rep


def per_scenario_splits(rep: MetricsReport) -> dict:
    """Scenario -> {"NLOS": mota, "LOS": mota} from a pooled suite report."""
    out = defaultdict(dict)
    for name, counts in rep.per_sequence.items():
        for vis in ("NLOS", "LOS"):
            if vis in counts:
                out[name][vis] = counts[vis]["mota"]
    return dict(out)
