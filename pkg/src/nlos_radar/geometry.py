"""Relay wall estimation and third-bounce (virtual detection) reconstruction."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AmbiguousHalfPlaneError, NoIntersectionError, UnreliableVelocityError
from .scene import MIN_WALL_LENGTH, ScenarioError, WallSegment, cross2

DEFAULT_BIN_SIZE = 0.01
DEFAULT_COS_EPS = 0.05


@dataclass
class LidarBev:
    points: np.ndarray  # (N, 2) world-frame hits
    bin_size: float = DEFAULT_BIN_SIZE

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    def occupied_cells(self) -> np.ndarray:
        """Centers of bins holding at least one return."""
        if len(self.points) == 0:
            return np.zeros((0, 2))
        idx = np.unique(np.floor(self.points / self.bin_size).astype(np.int64), axis=0)
        return (idx + 0.5) * self.bin_size


def _fit_line(pts):
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    d = vt[0]
    return centroid, d / np.hypot(*d)


def _runs(t, max_gap):
    """Split sorted 1D coordinates at gaps of at least ``max_gap``."""
    if len(t) == 0:
        return []
    breaks = np.nonzero(np.diff(t) >= max_gap)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [len(t)]])
    return list(zip(starts, ends))


def estimate_walls(bev: LidarBev, sensor=(0.0, 0.0), *, min_length: float = MIN_WALL_LENGTH,
                   inlier_tol: float = 0.05, max_gap: float = 0.2, split_gap: float = 0.5, min_support: int = 15,
                   iterations: int = 300, max_lines: int = 20, seed: int = 0) -> list[WallSegment]:
    """Line segments in the binarized occupancy grid of a lidar BEV.

    Sequential RANSAC proposes lines, a total-least-squares refit settles them,
    and each line's inliers are split into runs wherever consecutive cells are
    ``split_gap`` or more apart (lidar returns thin out at grazing incidence,
    so this is looser than the merge gap). Runs shorter than ``min_length``
    are dropped. Collinear segments separated by less than ``max_gap`` are
    merged.
    """
    c = np.asarray(sensor, dtype=float)
    pts = bev.occupied_cells()
    rng = np.random.default_rng(seed)
    segments: list[tuple[np.ndarray, np.ndarray]] = []
    remaining = pts
    for _ in range(max_lines):
        n = len(remaining)
        if n < min_support:
            break
        i = rng.integers(0, n, size=iterations)
        j = rng.integers(0, n, size=iterations)
        ok = i != j
        i, j = i[ok], j[ok]
        d = remaining[j] - remaining[i]
        norm = np.hypot(d[:, 0], d[:, 1])
        ok = norm > 0
        i, d, norm = i[ok], d[ok], norm[ok]
        if len(i) == 0:
            break
        nrm = np.stack([-d[:, 1], d[:, 0]], axis=1) / norm[:, None]
        dist = np.abs(remaining @ nrm.T - np.einsum("kd,kd->k", remaining[i], nrm)).T
        counts = (dist < inlier_tol).sum(axis=1)
        best = int(np.argmax(counts))
        if counts[best] < min_support:
            break
        inl = dist[best] < inlier_tol
        for _refit in range(2):
            centroid, direction = _fit_line(remaining[inl])
            normal = np.array([-direction[1], direction[0]])
            inl = np.abs((remaining - centroid) @ normal) < inlier_tol
        line_pts = remaining[inl]
        t = (line_pts - centroid) @ direction
        order = np.argsort(t)
        t = t[order]
        for s, e in _runs(t, split_gap):
            if e - s >= 2 and t[e - 1] - t[s] >= min_length:
                segments.append((centroid + t[s] * direction, centroid + t[e - 1] * direction))
        remaining = remaining[~inl]
    segments = _merge_collinear(segments, max_gap, inlier_tol)
    walls = []
    for k, (a, b) in enumerate(segments):
        if np.hypot(*(b - a)) < min_length:
            continue
        try:
            walls.append(WallSegment.from_endpoints(a, b, c, id=f"est{k}"))
        except ScenarioError:
            continue
    return walls


def _merge_collinear(segments, max_gap, tol, max_angle=math.radians(2.0)):
    segs = [(np.asarray(a, float), np.asarray(b, float)) for a, b in segments]
    merged = True
    while merged:
        merged = False
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                a1, b1 = segs[i]
                a2, b2 = segs[j]
                d1 = (b1 - a1) / np.hypot(*(b1 - a1))
                d2 = (b2 - a2) / np.hypot(*(b2 - a2))
                if abs(cross2(d1, d2)) > math.sin(max_angle):
                    continue
                n1 = np.array([-d1[1], d1[0]])
                if abs((a2 - a1) @ n1) > tol or abs((b2 - a1) @ n1) > tol:
                    continue
                t2 = sorted([(a2 - a1) @ d1, (b2 - a1) @ d1])
                L1 = float(np.hypot(*(b1 - a1)))
                gap = max(t2[0] - L1, 0.0 - t2[1], 0.0)
                if gap >= max_gap:
                    continue
                lo, hi = min(0.0, t2[0]), max(L1, t2[1])
                segs[i] = (a1 + lo * d1, a1 + hi * d1)
                del segs[j]
                merged = True
                break
            if merged:
                break
    return segs


def wall_intersection(c, x_v, wall: WallSegment) -> np.ndarray:
    """Point where the ray from c through x_v meets the wall line."""
    c = np.asarray(c, dtype=float)
    x_v = np.asarray(x_v, dtype=float)
    w = wall.p2 - wall.p1
    ray = x_v - c
    denom = cross2(ray, w)
    if abs(denom) <= 1e-12 * np.hypot(*ray) * np.hypot(*w):
        raise NoIntersectionError("ray is parallel to the wall")
    return c + cross2(wall.p1 - c, w) / denom * ray


def is_third_bounce(c, x_v, x_w, wall: WallSegment) -> bool:
    """x_v behind the wall (opposite the sensor) and x_w between the endpoints."""
    x_v = np.asarray(x_v, dtype=float)
    x_w = np.asarray(x_w, dtype=float)
    length = wall.length
    tol = 1e-12 * max(length, 1.0)
    return bool(wall.normal @ (x_v - wall.p1) >= 0
                and np.hypot(*(x_w - wall.p1)) <= length + tol
                and np.hypot(*(x_w - wall.p2)) <= length + tol)


def reconstruct_position(c, x_v, x_w, wall: WallSegment) -> np.ndarray:
    """True position of a virtual detection: continue from x_w along the mirrored ray."""
    c = np.asarray(c, dtype=float)
    x_v = np.asarray(x_v, dtype=float)
    x_w = np.asarray(x_w, dtype=float)
    d = x_w - c
    dn = float(np.hypot(*d))
    if dn == 0.0:
        raise ValueError("wall intersection coincides with the sensor")
    n = wall.normal
    return x_w + (d - 2.0 * float(n @ d) * n) * float(np.hypot(*(x_w - x_v))) / dn


def reconstruct_velocity(x_v, x_w, c, wall: WallSegment, v_r: float, eps: float = DEFAULT_COS_EPS) -> np.ndarray:
    """Wall-parallel velocity vector explaining the measured radial velocity.

    The half-plane sign compares the azimuth of x_v - c with the azimuth of
    the wall normal (difference wrapped to (-pi, pi]); ``x_w`` is accepted
    for interface symmetry only.
    """
    c = np.asarray(c, dtype=float)
    los = np.asarray(x_v, dtype=float) - c
    u = los / np.hypot(*los)
    w_hat = wall.direction
    cos_phi = float(u @ w_hat)
    if abs(cos_phi) <= eps:
        raise UnreliableVelocityError(f"|cos phi| = {abs(cos_phi):.3g} <= {eps}")
    dgamma = math.atan2(cross2(wall.normal, u), float(wall.normal @ u))
    if dgamma == 0.0:
        raise AmbiguousHalfPlaneError("virtual detection lies on the wall normal")
    return float(np.sign(v_r)) * float(np.sign(dgamma)) * abs(v_r) / abs(cos_phi) * w_hat


@dataclass
class NlosReconstruction:
    x: np.ndarray
    v: np.ndarray | None
    wall: WallSegment
    x_w: np.ndarray
    phi: float
    gamma_v: float
    gamma_w: float
    velocity_valid: bool = True

    @property
    def cos_phi(self) -> float:
        return math.cos(self.phi)


def reconstruct_detection(c, x_v, v_r: float, walls, eps: float = DEFAULT_COS_EPS) -> NlosReconstruction | None:
    """Map one detection through the first wall it is a third bounce of, if any.

    Among several candidate walls the one whose intersection is closest to
    the sensor wins.
    """
    c = np.asarray(c, dtype=float)
    x_v = np.asarray(x_v, dtype=float)
    best = None
    for wall in walls:
        try:
            x_w = wall_intersection(c, x_v, wall)
        except NoIntersectionError:
            continue
        if not is_third_bounce(c, x_v, x_w, wall):
            continue
        dist = float(np.hypot(*(x_w - c)))
        if best is None or dist < best[0]:
            best = (dist, wall, x_w)
    if best is None:
        return None
    _, wall, x_w = best
    x = reconstruct_position(c, x_v, x_w, wall)
    los = x_v - c
    u = los / np.hypot(*los)
    gamma_v = math.atan2(u[1], u[0])
    gamma_w = math.atan2(wall.normal[1], wall.normal[0])
    phi = math.acos(max(-1.0, min(1.0, float(u @ wall.direction))))
    try:
        v = reconstruct_velocity(x_v, x_w, c, wall, v_r, eps)
        valid = True
    except (UnreliableVelocityError, AmbiguousHalfPlaneError):
        v, valid = None, False
    return NlosReconstruction(x, v, wall, x_w, phi, gamma_v, gamma_w, valid)


@dataclass
class ReconstructedCloud:
    """Per-point positions after third-bounce correction.

    ``velocity`` rows are NaN for direct points and for unreliable
    geometry; ``radial_velocity`` is ego-motion compensated.
    """

    position: np.ndarray
    velocity: np.ndarray
    radial_velocity: np.ndarray
    amplitude: np.ndarray
    is_virtual: np.ndarray
    velocity_valid: np.ndarray
    wall_id: list = field(default_factory=list)
    virtual_position: np.ndarray | None = None
    los_unit: np.ndarray | None = None
    timestamp: float = 0.0
    motion_unit: np.ndarray | None = None   # m with radial_velocity = m . v_true

    def __post_init__(self):
        if self.motion_unit is None and self.los_unit is not None:
            self.motion_unit = np.array(self.los_unit, dtype=float)

    def __len__(self):
        return len(self.position)

    @property
    def log_amplitude(self):
        return np.log(self.amplitude)


def reconstruct_cloud(cloud, pose, walls, ego_velocity=(0.0, 0.0), eps: float = DEFAULT_COS_EPS) -> ReconstructedCloud:
    c = pose.position
    xy = cloud.cartesian(pose) if len(cloud) else np.zeros((0, 2))
    n = len(xy)
    los = xy - c
    dist = np.hypot(los[:, 0], los[:, 1]) if n else np.zeros(0)
    u = los / np.where(dist > 0, dist, 1.0)[:, None] if n else np.zeros((0, 2))
    v_r = cloud.radial_velocity + u @ np.asarray(ego_velocity, dtype=float) if n else np.zeros(0)
    pos = xy.copy()
    vel = np.full((n, 2), np.nan)
    virtual = np.zeros(n, dtype=bool)
    valid = np.zeros(n, dtype=bool)
    wall_ids = [None] * n
    m = u.copy()
    for i in range(n):
        rec = reconstruct_detection(c, xy[i], float(v_r[i]), walls, eps)
        if rec is None:
            continue
        pos[i] = rec.x
        virtual[i] = True
        wall_ids[i] = rec.wall.id
        nrm = rec.wall.normal
        m[i] = u[i] - 2.0 * float(u[i] @ nrm) * nrm
        if rec.velocity_valid:
            vel[i] = rec.v
            valid[i] = True
    return ReconstructedCloud(pos, vel, np.asarray(v_r, dtype=float), cloud.amplitude.copy(), virtual, valid,
                              wall_ids, xy, u, cloud.timestamp, m)


# --------------------------------------------------------------------------
# serialization

WALL_FIELDS = ("id", "p1_x", "p1_y", "p2_x", "p2_y", "normal_x", "normal_y")


def write_walls_csv(path, walls) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(WALL_FIELDS)
        for wall in walls:
            w.writerow([wall.id] + [repr(float(v)) for v in (*wall.p1, *wall.p2, *wall.normal)])


def read_walls_csv(path) -> list[WallSegment]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            p1 = np.array([float(row["p1_x"]), float(row["p1_y"])])
            p2 = np.array([float(row["p2_x"]), float(row["p2_y"])])
            n = np.array([float(row["normal_x"]), float(row["normal_y"])])
            out.append(WallSegment(p1, p2, n, row["id"]))
    return out


def write_lidar_csv(path, bev: LidarBev) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# nlos-radar/lidar-bev v1 bin_size={bev.bin_size!r}\n")
        w = csv.writer(fh)
        w.writerow(("x", "y"))
        for x, y in bev.points.tolist():
            w.writerow((repr(x), repr(y)))


def read_lidar_csv(path) -> LidarBev:
    with open(path, newline="") as fh:
        head = fh.readline()
        bin_size = float(head.strip().split("bin_size=")[1])
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    return LidarBev(pts, bin_size)


def reconstruction_records(frame: int, rc: ReconstructedCloud) -> list[dict]:
    recs = []
    for i in range(len(rc)):
        recs.append({
            "frame": frame,
            "source": {"x": float(rc.virtual_position[i, 0]), "y": float(rc.virtual_position[i, 1]),
                       "radial_velocity": float(rc.radial_velocity[i]), "amplitude": float(rc.amplitude[i])},
            "x": float(rc.position[i, 0]), "y": float(rc.position[i, 1]),
            "vx": None if not rc.velocity_valid[i] else float(rc.velocity[i, 0]),
            "vy": None if not rc.velocity_valid[i] else float(rc.velocity[i, 1]),
            "wall_id": rc.wall_id[i],
            "virtual": bool(rc.is_virtual[i]),
            "velocity_valid": bool(rc.velocity_valid[i]),
            "los": [float(rc.los_unit[i, 0]), float(rc.los_unit[i, 1])],
            "motion_unit": [float(rc.motion_unit[i, 0]), float(rc.motion_unit[i, 1])],
            "timestamp": float(rc.timestamp),
        })
    return recs


def cloud_from_records(records, timestamp: float = 0.0) -> ReconstructedCloud:
    """Inverse of :func:`reconstruction_records` for one frame."""
    n = len(records)
    nan = float("nan")
    if n:
        timestamp = records[0].get("timestamp", timestamp)
    return ReconstructedCloud(
        position=np.array([[r["x"], r["y"]] for r in records], dtype=float).reshape(n, 2),
        velocity=np.array([[nan if r["vx"] is None else r["vx"], nan if r["vy"] is None else r["vy"]]
                           for r in records], dtype=float).reshape(n, 2),
        radial_velocity=np.array([r["source"]["radial_velocity"] for r in records], dtype=float),
        amplitude=np.array([r["source"]["amplitude"] for r in records], dtype=float),
        is_virtual=np.array([r["virtual"] for r in records], dtype=bool),
        velocity_valid=np.array([r["velocity_valid"] for r in records], dtype=bool),
        wall_id=[r["wall_id"] for r in records],
        virtual_position=np.array([[r["source"]["x"], r["source"]["y"]] for r in records], dtype=float).reshape(n, 2),
        los_unit=np.array([r["los"] for r in records], dtype=float).reshape(n, 2),
        timestamp=timestamp,
        motion_unit=np.array([r["motion_unit"] for r in records], dtype=float).reshape(n, 2),
    )


def write_ndjson(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
