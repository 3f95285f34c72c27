"""Constant-velocity Kalman tracker with optional velocity-measurement fusion."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detection import OrientedBox, RECORD_FIELDS


@dataclass
class TrackerParams:
    gate: float = 2.0                  # center distance gate (m)
    velocity_gate: float | None = 2.0  # m/s, None disables velocity gating
    max_misses: int = 5                # drop after this many consecutive misses
    sigma_pos: float = 0.2             # position measurement std (m)
    sigma_vel: float = 0.3             # velocity measurement std floor (m/s)
    accel_noise: float = 1.5           # white acceleration std (m/s^2)
    init_vel_std: float = 2.0          # velocity std of a fresh track without a velocity measurement
    use_velocity: bool = True
    hungarian: bool = False
    min_hits: int = 2                  # hits before a track is reported
    max_coast: int = 1                 # report tracks missed at most this many frames
    fragment_radius: float | None = 2.0  # no spawns this close to a confirmed track


@dataclass
class Track:
    id: int
    state: np.ndarray                  # x, y, vx, vy
    cov: np.ndarray
    boxes: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    missed_count: int = 0
    hits: int = 1
    template: OrientedBox | None = None

    @property
    def position(self) -> np.ndarray:
        return self.state[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:]

    def current_box(self) -> OrientedBox:
        t = self.template
        vx, vy = self.state[2:]
        speed = math.hypot(vx, vy)
        x, y = float(self.state[0]), float(self.state[1])
        if speed <= 0.3:
            # heading is not observable at walking-start speeds; keep the detector's yaw
            v = vx * math.cos(t.yaw) + vy * math.sin(t.yaw)
            return OrientedBox(x, y, t.w, t.l, t.yaw, float(v), t.cls, t.score, self.id)
        return OrientedBox.from_heading(x, y, t.w, t.l, math.atan2(vy, vx), speed, cls=t.cls, score=t.score,
                                        id=self.id)


def _transition(dt):
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def _process_noise(dt, q):
    # white acceleration, per axis [[dt^4/4, dt^3/2], [dt^3/2, dt^2]]
    g = np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]]) * q * q
    Q = np.zeros((4, 4))
    Q[np.ix_([0, 2], [0, 2])] = g
    Q[np.ix_([1, 3], [1, 3])] = g
    return Q


def _kf_update(x, P, z, H, R):
    y = z - H @ x
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = x + K @ y
    I_KH = np.eye(len(x)) - K @ H
    P = I_KH @ P @ I_KH.T + K @ R @ K.T
    return x, P


def _measurement(det: OrientedBox, p: TrackerParams):
    """Stack position and (optionally) velocity rows for one detection."""
    H = [[1, 0, 0, 0], [0, 1, 0, 0]]
    z = [det.x, det.y]
    r = [p.sigma_pos ** 2, p.sigma_pos ** 2]
    if p.use_velocity:
        if det.vxy is not None:
            var = p.sigma_vel ** 2 + (det.vxy_var or 0.0)
            H += [[0, 0, 1, 0], [0, 0, 0, 1]]
            z += list(det.vxy)
            r += [var, var]
        elif det.radial is not None:
            v_r, ux, uy = det.radial
            H.append([0, 0, ux, uy])
            z.append(v_r)
            r.append(p.sigma_vel ** 2)
    return np.array(z, dtype=float), np.array(H, dtype=float), np.diag(r)


def _spawn(det: OrientedBox, tid: int, t: float, p: TrackerParams) -> Track:
    x = np.array([det.x, det.y, 0.0, 0.0])
    P = np.diag([p.sigma_pos ** 2, p.sigma_pos ** 2, p.init_vel_std ** 2, p.init_vel_std ** 2])
    if p.use_velocity and det.vxy is not None:
        x[2:] = det.vxy
        var = p.sigma_vel ** 2 + (det.vxy_var or 0.0)
        P[2, 2] = P[3, 3] = var
    elif p.use_velocity and det.radial is not None:
        z, H, R = _measurement(det, p)
        x, P = _kf_update(x, P, z[2:], H[2:], R[2:, 2:])
    tr = Track(tid, x, P, template=det.with_(id=tid))
    tr.boxes.append(tr.current_box())
    tr.timestamps.append(t)
    return tr


def _velocity_ok(tr: Track, det: OrientedBox, p: TrackerParams) -> bool:
    if p.velocity_gate is None or not p.use_velocity or tr.hits < 2:
        return True
    if det.vxy is not None:
        return float(np.hypot(*(np.asarray(det.vxy) - tr.velocity))) <= p.velocity_gate
    if det.radial is not None:
        v_r, ux, uy = det.radial
        return abs(v_r - (ux * tr.velocity[0] + uy * tr.velocity[1])) <= p.velocity_gate
    return True


def _associate(tracks, detections, p: TrackerParams):
    """(track, detection, velocity_consistent) triples.

    Pairs must lie within the position gate. Velocity-inconsistent pairs
    are ranked after all consistent ones, so velocity decides between
    nearby candidates without vetoing an otherwise lone match.
    """
    if not tracks or not detections:
        return []
    pred = np.array([t.position for t in tracks])
    cen = np.array([[d.x, d.y] for d in detections])
    dist = np.hypot(pred[:, None, 0] - cen[None, :, 0], pred[:, None, 1] - cen[None, :, 1])
    ok = dist <= p.gate
    consistent = np.ones_like(ok)
    for i, tr in enumerate(tracks):
        for j, det in enumerate(detections):
            if ok[i, j]:
                consistent[i, j] = _velocity_ok(tr, det, p)
    cost = dist + np.where(consistent, 0.0, 2.0 * p.gate)
    if p.hungarian:
        rows, cols = linear_sum_assignment(np.where(ok, cost, 1e6))
        return [(i, j, bool(consistent[i, j])) for i, j in zip(rows, cols) if ok[i, j]]
    pairs = []
    used_t, used_d = set(), set()
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), cost.shape[1])
        if not ok[i, j] or i in used_t or j in used_d:
            continue
        pairs.append((i, j, bool(consistent[i, j])))
        used_t.add(i)
        used_d.add(j)
    return pairs


def track_update(tracks, detections, dt: float, params: TrackerParams | None = None, id_source=None,
                 timestamp: float | None = None) -> list[Track]:
    """Advance ``tracks`` by one frame and absorb ``detections``.

    Tracks are updated in place; the returned list holds the survivors plus
    newly spawned tracks. ``id_source`` is an iterator of fresh ids.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = params or TrackerParams()
    if id_source is None:
        id_source = itertools.count(max((t.id for t in tracks), default=0) + 1)
    F = _transition(dt)
    Q = _process_noise(dt, p.accel_noise)
    for tr in tracks:
        tr.state = F @ tr.state
        tr.cov = F @ tr.cov @ F.T + Q
    t_now = timestamp if timestamp is not None else (tracks[0].timestamps[-1] + dt if tracks else 0.0)
    pairs = _associate(tracks, detections, p)
    matched_t = {i for i, _, _ in pairs}
    matched_d = {j for _, j, _ in pairs}
    for i, j, consistent in pairs:
        tr, det = tracks[i], detections[j]
        if not consistent:
            det = det.with_(vxy=None, vxy_var=None, radial=None)
        z, H, R = _measurement(det, p)
        tr.state, tr.cov = _kf_update(tr.state, tr.cov, z, H, R)
        tr.template = det.with_(id=tr.id)
        tr.missed_count = 0
        tr.hits += 1
    out = []
    for i, tr in enumerate(tracks):
        if i not in matched_t:
            tr.missed_count += 1
            if tr.missed_count >= p.max_misses:
                continue
        tr.boxes.append(tr.current_box())
        tr.timestamps.append(t_now)
        out.append(tr)
    confirmed = np.array([t.position for t in out if t.hits >= p.min_hits]).reshape(-1, 2)
    for j, det in enumerate(detections):
        if j in matched_d:
            continue
        if p.fragment_radius is not None and len(confirmed):
            # split clusters leave a second detection beside a tracked object
            if np.min(np.hypot(confirmed[:, 0] - det.x, confirmed[:, 1] - det.y)) <= p.fragment_radius:
                continue
        out.append(_spawn(det, next(id_source), t_now, p))
    return out


class Tracker:
    """Stateful wrapper: one instance per frame stream."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.tracks: list[Track] = []
        self._ids = itertools.count(1)
        self._last_t = None

    def step(self, detections, timestamp: float) -> list[OrientedBox]:
        """Update with one frame of detections and return the reported boxes."""
        p = self.params
        if self._last_t is None:
            self.tracks = [_spawn(d, next(self._ids), timestamp, p) for d in detections]
        else:
            dt = timestamp - self._last_t
            self.tracks = track_update(self.tracks, detections, dt, p, self._ids, timestamp)
        self._last_t = timestamp
        return self.reported()

    def reported(self) -> list[OrientedBox]:
        p = self.params
        return [t.boxes[-1] for t in self.tracks if t.hits >= p.min_hits and t.missed_count <= p.max_coast]


def predict_future(track: Track, n: int, dt: float) -> list[OrientedBox]:
    """Current box followed by ``n`` constant-velocity extrapolations."""
    if not track.boxes:
        raise ValueError("track has no boxes")
    cur = track.boxes[-1]
    vx, vy = track.velocity
    return [cur.with_(x=cur.x + k * dt * vx, y=cur.y + k * dt * vy) for k in range(n + 1)]


def box_records(frame: int, boxes) -> list[dict]:
    """Newline-delimited record dicts with the documented field order."""
    out = []
    for b in boxes:
        rec = b.to_record(frame)
        out.append({k: rec[k] for k in RECORD_FIELDS})
    return out
