"""Detection, localization and CLEAR-MOT scoring against scenario ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detection import OrientedBox
from .scene import Scenario, line_of_sight_blocked, object_state_at

NLOS, LOS = "NLOS", "LOS"
IOU_THRESHOLDS = (0.5, 0.25, 0.1)
AP_CLASSES = ("object", "pedestrian", "cyclist")


# --------------------------------------------------------------------------
# rotated IoU

def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by counter-clockwise convex ``clip``."""
    out = [np.asarray(p, dtype=float) for p in subject]
    clip = np.asarray(clip, dtype=float)
    for i in range(len(clip)):
        a, b = clip[i], clip[(i + 1) % len(clip)]
        e = b - a
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0])

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def oriented_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two rotated rectangles."""
    ca, cb = a.corners(), b.corners()
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    inter = max(polygon_area(clip_convex(ca, cb)), 0.0)
    union = a.w * a.l + b.w * b.l - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def center_distance(a: OrientedBox, b: OrientedBox) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


# --------------------------------------------------------------------------
# ground truth

@dataclass
class FrameGroundTruth:
    frame: int
    boxes: list                       # OrientedBox with object ids
    visibility: dict                  # object id -> NLOS | LOS
    timestamp: float = 0.0

    @property
    def frame_visibility(self) -> str | None:
        if not self.boxes:
            return None
        return NLOS if any(self.visibility[b.id] == NLOS for b in self.boxes) else LOS

    def to_record(self) -> dict:
        return {"frame": self.frame, "timestamp": self.timestamp,
                "objects": [dict(b.to_record(self.frame), visibility=self.visibility[b.id]) for b in self.boxes]}

    @classmethod
    def from_record(cls, rec: dict) -> "FrameGroundTruth":
        boxes, vis = [], {}
        for o in rec["objects"]:
            boxes.append(OrientedBox(o["x"], o["y"], o["w"], o["l"], o["theta"], o["v"], o["class"], o["score"],
                                     o["id"]))
            vis[o["id"]] = o["visibility"]
        return cls(rec["frame"], boxes, vis, rec.get("timestamp", 0.0))


def ground_truth(scenario: Scenario, frames=None) -> list[FrameGroundTruth]:
    """Boxes and visibility of every hidden object at each frame time."""
    out = []
    for k in (range(scenario.num_frames) if frames is None else frames):
        t = scenario.frame_time(k)
        c = scenario.sensor_pose_at(t).position
        boxes, vis = [], {}
        for obj in scenario.objects:
            pos, vel = object_state_at(scenario, obj.id, t)
            speed = float(np.hypot(*vel))
            heading = math.atan2(vel[1], vel[0]) if speed > 0 else 0.0
            boxes.append(OrientedBox.from_heading(float(pos[0]), float(pos[1]), obj.width, obj.length, heading,
                                                  speed, cls=obj.cls, score=1.0, id=obj.id))
            vis[obj.id] = NLOS if line_of_sight_blocked(c, pos, scenario.walls) else LOS
        out.append(FrameGroundTruth(k, boxes, vis, t))
    return out


# --------------------------------------------------------------------------
# average precision

def _filter(boxes, cls):
    if cls in (None, "object"):
        return list(boxes)
    return [b for b in boxes if b.cls == cls]


def average_precision(dets, gts, iou_thresh: float, cls: str | None = None) -> float:
    """All-point interpolated AP in percent.

    ``dets`` and ``gts`` are per-frame lists of boxes. ``cls`` of None or
    "object" merges classes. Each ground truth is claimed at most once, by
    the highest-overlap unclaimed box in score order.
    """
    if len(dets) != len(gts):
        raise ValueError("detections and ground truth must be frame aligned")
    g = [_filter(f, cls) for f in gts]
    n_gt = sum(len(f) for f in g)
    if n_gt == 0:
        return float("nan")
    flat = [(b.score, fi, b) for fi, f in enumerate(dets) for b in _filter(f, cls)]
    if not flat:
        return 0.0
    order = sorted(range(len(flat)), key=lambda i: -flat[i][0])
    claimed = [np.zeros(len(f), dtype=bool) for f in g]
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _, fi, b = flat[i]
        best, best_j = iou_thresh, -1
        for j, gb in enumerate(g[fi]):
            if claimed[fi][j]:
                continue
            iou = oriented_iou(b, gb)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            claimed[fi][best_j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.r_[0.0, recall, 1.0]
    mpre = np.r_[0.0, precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(100.0 * np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# --------------------------------------------------------------------------
# localization

def match_boxes(pred, gt, iou_thresh: float = 0.1):
    """Greedy highest-IoU one-to-one matching; returns (pred, gt) pairs."""
    cand = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            iou = oriented_iou(p, g)
            if iou >= iou_thresh:
                cand.append((iou, i, j))
    cand.sort(key=lambda c: -c[0])
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((pred[i], gt[j]))
    return pairs


def localization_error(pairs) -> tuple[float, float]:
    """(MAE, MSE) of center distances over matched (pred, gt) pairs."""
    if len(pairs) == 0:
        raise ValueError("no matched pairs")
    d = np.array([center_distance(p, g) for p, g in pairs])
    return float(d.mean()), float(np.mean(d ** 2))


# --------------------------------------------------------------------------
# CLEAR-MOT

@dataclass
class MotCounts:
    gt: int = 0
    fn: int = 0
    fp: int = 0
    idsw: int = 0
    matches: int = 0
    overlap_sum: float = 0.0
    dist_sum: float = 0.0
    dist_sq_sum: float = 0.0

    def __iadd__(self, o: "MotCounts"):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(o, k))
        return self

    @property
    def mota(self) -> float:
        return 1.0 - (self.fn + self.fp + self.idsw) / self.gt if self.gt else float("nan")

    @property
    def motp(self) -> float:
        return self.overlap_sum / self.matches if self.matches else float("nan")

    @property
    def mae(self) -> float:
        return self.dist_sum / self.matches if self.matches else float("nan")

    @property
    def mse(self) -> float:
        return self.dist_sq_sum / self.matches if self.matches else float("nan")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("gt", "fn", "fp", "idsw", "matches")}
        d.update(mota=self.mota, motp=self.motp, mae=self.mae, mse=self.mse)
        return d


def clear_mot_counts(tracks, gt_tracks, match_thresh: float = 0.1, visibility=None, distance: bool = False):
    """Accumulate CLEAR-MOT counts over frame-aligned lists of id-carrying boxes.

    ``visibility`` is an optional per-frame label; the result maps each label
    (and "all") to its :class:`MotCounts`. With ``distance`` the match score
    is center distance (match if <= ``match_thresh``) and MOTP averages it.
    """
    if len(tracks) != len(gt_tracks):
        raise ValueError("tracks and ground truth must be frame aligned")
    out = {"all": MotCounts()}
    mapping = {}       # gt id -> track id matched in the previous frame it was matched
    for f, (hyp, gts) in enumerate(zip(tracks, gt_tracks)):
        c = MotCounts(gt=len(gts))
        if distance:
            score = np.array([[center_distance(h, g) for h in hyp] for g in gts]).reshape(len(gts), len(hyp))
            ok = score <= match_thresh
            cost = score
        else:
            score = np.array([[oriented_iou(h, g) for h in hyp] for g in gts]).reshape(len(gts), len(hyp))
            ok = score >= match_thresh
            cost = 1.0 - score
        hyp_ids = [h.id for h in hyp]
        pairs = []
        free_g, free_h = set(range(len(gts))), set(range(len(hyp)))
        # keep last frame's correspondences while still valid
        for gi, g in enumerate(gts):
            tid = mapping.get(g.id)
            if tid in hyp_ids:
                hi = hyp_ids.index(tid)
                if ok[gi, hi] and hi in free_h:
                    pairs.append((gi, hi))
                    free_g.discard(gi)
                    free_h.discard(hi)
        if free_g and free_h:
            gl, hl = sorted(free_g), sorted(free_h)
            sub = np.where(ok[np.ix_(gl, hl)], cost[np.ix_(gl, hl)], 1e9)
            for r, q in zip(*linear_sum_assignment(sub)):
                if sub[r, q] < 1e9:
                    pairs.append((gl[r], hl[q]))
        for gi, hi in pairs:
            g, h = gts[gi], hyp[hi]
            if g.id in mapping and mapping[g.id] != h.id:
                c.idsw += 1
            mapping[g.id] = h.id
            c.matches += 1
            c.overlap_sum += float(score[gi, hi])
            d = center_distance(h, g)
            c.dist_sum += d
            c.dist_sq_sum += d * d
        c.fn = len(gts) - len(pairs)
        c.fp = len(hyp) - len(pairs)
        out["all"] += c
        if visibility is not None and visibility[f] is not None:
            out.setdefault(visibility[f], MotCounts())
            out[visibility[f]] += c
    return out


def clear_mot(tracks, gt_tracks, match_thresh: float = 0.1, distance: bool = False) -> tuple[float, float]:
    """(MOTA, MOTP) over frame-aligned per-frame box lists."""
    c = clear_mot_counts(tracks, gt_tracks, match_thresh, distance=distance)["all"]
    return c.mota, c.motp


# --------------------------------------------------------------------------
# report

@dataclass
class Sequence:
    """Per-frame detector output, tracker output and ground truth of one run."""

    detections: list
    tracks: list
    ground_truth: list                # FrameGroundTruth
    name: str = ""


def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


@dataclass
class MetricsReport:
    ap: dict = field(default_factory=dict)          # (class, threshold) -> AP
    center_mae: float = float("nan")
    center_mse: float = float("nan")
    mota: float = float("nan")
    motp: float = float("nan")
    splits: dict = field(default_factory=dict)      # NLOS/LOS -> MotCounts dict
    counts: dict = field(default_factory=dict)
    tag: str = "w/ v"
    name: str = ""
    per_sequence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "tag": self.tag,
                "ap": {f"{c}@{t}": v for (c, t), v in sorted(self.ap.items())},
                "center_mae": self.center_mae, "center_mse": self.center_mse,
                "mota": self.mota, "motp": self.motp, "counts": self.counts,
                "splits": self.splits, "per_sequence": self.per_sequence}

    def to_json(self) -> str:
        # undefined metrics (no ground truth of a class or split) become null
        return json.dumps(_nan_to_none(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_markdown(self, split_visibility: bool = True) -> str:
        def fmt(v, nd=2):
            return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{nd}f}"

        lines = [f"## Detection ({self.tag})", "",
                 "| Class | AP@0.5 | AP@0.25 | AP@0.1 |", "|---|---|---|---|"]
        for c in AP_CLASSES:
            row = [fmt(self.ap.get((c, t))) for t in IOU_THRESHOLDS]
            lines.append(f"| {c.capitalize()} | " + " | ".join(row) + " |")
        lines += ["", f"## Tracking ({self.tag})", "",
                  "| Frames | MOTA | MOTP | MAE (m) | MSE (m^2) |", "|---|---|---|---|---|"]
        lines.append(f"| All | {fmt(self.mota)} | {fmt(self.motp)} | {fmt(self.center_mae, 3)} | "
                     f"{fmt(self.center_mse, 3)} |")
        if split_visibility:
            for vis in (NLOS, LOS):
                s = self.splits.get(vis)
                if s:
                    lines.append(f"| {vis} | {fmt(s['mota'])} | {fmt(s['motp'])} | {fmt(s['mae'], 3)} | "
                                 f"{fmt(s['mse'], 3)} |")
        return "\n".join(lines) + "\n"


def evaluate(sequences, tag: str = "w/ v", name: str = "", match_thresh: float = 0.1,
             distance_motp: bool = False) -> MetricsReport:
    """Score one or more sequences; counts are pooled across sequences."""
    if isinstance(sequences, Sequence):
        sequences = [sequences]
    all_dets, all_gts = [], []
    total = {"all": MotCounts()}
    per_seq = {}
    for seq in sequences:
        gt_boxes = [g.boxes for g in seq.ground_truth]
        all_dets += list(seq.detections)
        all_gts += gt_boxes
        vis = [g.frame_visibility for g in seq.ground_truth]
        counts = clear_mot_counts(seq.tracks, gt_boxes, match_thresh, vis, distance_motp)
        per_seq[seq.name or str(len(per_seq))] = {k: v.to_dict() for k, v in counts.items()}
        for k, v in counts.items():
            total.setdefault(k, MotCounts())
            total[k] += v
    rep = MetricsReport(tag=tag, name=name, per_sequence=per_seq)
    for c in AP_CLASSES:
        for t in IOU_THRESHOLDS:
            rep.ap[(c, t)] = average_precision(all_dets, all_gts, t, c)
    a = total["all"]
    rep.mota, rep.motp, rep.center_mae, rep.center_mse = a.mota, a.motp, a.mae, a.mse
    rep.counts = a.to_dict()
    rep.splits = {k: v.to_dict() for k, v in total.items() if k != "all"}
    return rep
