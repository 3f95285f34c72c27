"""Pseudo-image rasterization, clustering detector and box regression targets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from sklearn.cluster import DBSCAN

CLASSES = ("background", "cyclist", "pedestrian")
# 60 m lateral x 80 m forward at 0.1 m
DEFAULT_ROI = (0.0, -30.0, 80.0, 60.0)  # x0, y0, extent along x, extent along y
DEFAULT_CELL = 0.1


def wrap_half_pi(theta):
    """Map an orientation to [-pi/2, pi/2) (front and back are identical).

    Values already in range are returned unchanged so records round-trip.
    """
    if -math.pi / 2 <= theta < math.pi / 2:
        return theta
    return (theta + math.pi / 2) % math.pi - math.pi / 2


@dataclass(frozen=True)
class OrientedBox:
    """2D box with ``l`` along the yaw axis and ``w`` across it.

    ``v`` is the signed speed along the yaw axis. The optional fields carry
    measurement side information for the tracker.
    """

    x: float
    y: float
    w: float
    l: float
    yaw: float = 0.0
    v: float = 0.0
    cls: str = "pedestrian"
    score: float = 1.0
    id: object = None
    vxy: tuple | None = None          # full velocity vector, when reconstructed
    vxy_var: float | None = None
    radial: tuple | None = None       # (v_r, ux, uy) for direct returns
    support: int = 0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError("box sizes must be positive")
        object.__setattr__(self, "yaw", float(wrap_half_pi(float(self.yaw))))

    @classmethod
    def from_heading(klass, x, y, w, l, heading, speed, **kw):
        yaw = wrap_half_pi(heading)
        sign = 1.0 if math.cos(heading - yaw) >= 0 else -1.0
        return klass(x, y, w, l, yaw, sign * speed, **kw)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity_vector(self) -> np.ndarray:
        return self.v * np.array([math.cos(self.yaw), math.sin(self.yaw)])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ax = np.array([c, s]) * self.l / 2
        ay = np.array([-s, c]) * self.w / 2
        ctr = self.center
        return np.array([ctr + ax + ay, ctr - ax + ay, ctr - ax - ay, ctr + ax - ay])

    def with_(self, **kw) -> "OrientedBox":
        return replace(self, **kw)

    def to_record(self, frame=None, extended: bool = False) -> dict:
        rec = {"frame": frame, "id": self.id, "class": self.cls, "score": self.score, "x": self.x,
               "y": self.y, "w": self.w, "l": self.l, "theta": self.yaw, "v": self.v}
        if extended:
            rec.update(vxy=None if self.vxy is None else list(self.vxy), vxy_var=self.vxy_var,
                       radial=None if self.radial is None else list(self.radial), support=self.support)
        return rec


# the first ten fields are stable; extended records append measurement side information
RECORD_FIELDS = ("frame", "id", "class", "score", "x", "y", "w", "l", "theta", "v")
EXTENDED_FIELDS = RECORD_FIELDS + ("vxy", "vxy_var", "radial", "support")


def box_from_record(rec: dict) -> OrientedBox:
    vxy, radial = rec.get("vxy"), rec.get("radial")
    return OrientedBox(rec["x"], rec["y"], rec["w"], rec["l"], rec["theta"], rec["v"], rec["class"],
                       rec["score"], rec["id"], vxy=None if vxy is None else tuple(vxy),
                       vxy_var=rec.get("vxy_var"), radial=None if radial is None else tuple(radial),
                       support=rec.get("support", 0))


@dataclass
class PseudoImage:
    grid: np.ndarray          # (2, H, W): radial velocity, log amplitude
    cell_size: float
    origin: tuple             # world (x, y) of cell (0, 0) corner

    @property
    def shape(self):
        return self.grid.shape


def rasterize(points, roi=DEFAULT_ROI, cell_size: float = DEFAULT_CELL) -> PseudoImage:
    """Grid (x, y, v_r, s) points; rows run along x, columns along y.

    Each cell keeps the signed velocity of its largest-magnitude point and the
    largest log amplitude. Points outside the region are ignored.
    """
    x0, y0, ex, ey = roi
    if cell_size <= 0 or ex <= 0 or ey <= 0:
        raise ValueError("roi extents and cell size must be positive")
    H = int(round(ex / cell_size))
    W = int(round(ey / cell_size))
    grid = np.zeros((2, H, W))
    pts = np.asarray(points, dtype=float).reshape(-1, 4)
    if len(pts) == 0:
        return PseudoImage(grid, cell_size, (x0, y0))
    row = np.floor((pts[:, 0] - x0) / cell_size).astype(np.int64)
    col = np.floor((pts[:, 1] - y0) / cell_size).astype(np.int64)
    inside = (row >= 0) & (row < H) & (col >= 0) & (col < W)
    row, col, pts = row[inside], col[inside], pts[inside]
    if len(pts) == 0:
        return PseudoImage(grid, cell_size, (x0, y0))
    flat = row * W + col
    order = np.lexsort((np.abs(pts[:, 2]), flat))
    last = np.r_[flat[order][1:] != flat[order][:-1], True]
    sel = order[last]
    grid[0].flat[flat[sel]] = pts[sel, 2]
    smax = np.full(H * W, -np.inf)
    np.maximum.at(smax, flat, pts[:, 3])
    occupied = np.isfinite(smax)
    grid[1].flat[np.nonzero(occupied)[0]] = smax[occupied]
    return PseudoImage(grid, cell_size, (x0, y0))


def min_area_rectangle(pts):
    """(center, length, width, yaw) of the minimum-area enclosing rectangle.

    Returns None when the points do not span an area (fewer than 3 distinct
    points, or collinear).
    """
    pts = np.unique(np.asarray(pts, dtype=float), axis=0)
    if len(pts) < 3:
        return None
    try:
        hull = pts[ConvexHull(pts).vertices]
    except QhullError:
        return None
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        ang = math.atan2(e[1], e[0])
        c, s = math.cos(ang), math.sin(ang)
        proj = hull @ np.array([[c, -s], [s, c]])
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0]:
            mid = (lo + hi) / 2
            center = np.array([c * mid[0] - s * mid[1], s * mid[0] + c * mid[1]])
            ext = hi - lo
            if ext[0] >= ext[1]:
                best = (area, center, ext[0], ext[1], ang)
            else:
                best = (area, center, ext[1], ext[0], ang + math.pi / 2)
    _, center, length, width, yaw = best
    return center, float(length), float(width), float(wrap_half_pi(yaw))


@dataclass
class DetectorParams:
    eps: float = 1.5                   # DBSCAN radius (m)
    min_points: int = 1                # DBSCAN core weight
    invalid_velocity_weight: float = 0.5
    min_radial_speed: float = 0.2      # drop points slower than this (m/s)
    roi: tuple = DEFAULT_ROI
    consistency_cap: float = 1.0       # m/s, robust cap on radial residuals
    velocity_agreement: float = 1.0    # m/s, candidates pooled around the best one
    radial_inlier_tol: float = 0.15    # m/s, joint radial solve inlier band
    min_conditioning: float = 0.15     # singular value ratio for a joint radial solve
    cyclist_speed: float = 2.5
    cyclist_length: float = 1.2
    prior_size: dict = field(default_factory=lambda: {"pedestrian": (0.6, 0.6), "cyclist": (0.6, 1.8)})


def detect(cloud, params: DetectorParams | None = None) -> list[OrientedBox]:
    """Cluster moving reconstructed points into oriented boxes.

    ``cloud`` is a :class:`~nlos_radar.geometry.ReconstructedCloud` (or any
    object with the same array attributes).
    """
    p = params or DetectorParams()
    pos = np.asarray(cloud.position, dtype=float).reshape(-1, 2)
    if len(pos) == 0:
        return []
    v_r = np.asarray(cloud.radial_velocity, dtype=float)
    vel = np.asarray(cloud.velocity, dtype=float).reshape(-1, 2)
    amp = np.asarray(cloud.amplitude, dtype=float)
    valid = np.asarray(cloud.velocity_valid, dtype=bool)
    x0, y0, ex, ey = p.roi
    keep = (np.abs(v_r) >= p.min_radial_speed)
    keep &= (pos[:, 0] >= x0) & (pos[:, 0] < x0 + ex) & (pos[:, 1] >= y0) & (pos[:, 1] < y0 + ey)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return []
    virtual = np.asarray(getattr(cloud, "is_virtual", valid), dtype=bool)
    weights = np.where(virtual[idx] & ~valid[idx], p.invalid_velocity_weight, 1.0)
    labels = DBSCAN(eps=p.eps, min_samples=p.min_points).fit(pos[idx], sample_weight=weights).labels_
    mu_all = getattr(cloud, "motion_unit", None)
    if mu_all is None:
        mu_all = getattr(cloud, "los_unit", None)
    boxes = []
    for lab in sorted(set(labels.tolist()) - {-1}):
        m = idx[labels == lab]
        wsum = float(weights[labels == lab].sum())
        pts, a = pos[m], amp[m]
        vmask = valid[m]
        rect = min_area_rectangle(pts)
        vxy, vvar = _cluster_velocity(vel[m][vmask], a[vmask], v_r[m],
                                      None if mu_all is None else np.asarray(mu_all)[m], virtual[m], p)
        if vxy is not None and np.hypot(*vxy) > 1e-6:
            heading = math.atan2(vxy[1], vxy[0])
            speed = float(np.hypot(*vxy))
        elif rect is not None:
            heading, speed = rect[3], float(np.average(np.abs(v_r[m]), weights=a))
        else:
            heading, speed = 0.0, float(np.average(np.abs(v_r[m]), weights=a))
        if rect is not None:
            center, length, width, _ = rect
        else:
            center = pts.mean(axis=0) if len(pts) > 1 else pts[0]
            d = np.array([math.cos(heading), math.sin(heading)])
            proj = (pts - center) @ d
            perp = (pts - center) @ np.array([-d[1], d[0]])
            length = float(np.ptp(proj)) if len(pts) > 1 else 0.0
            width = float(np.ptp(perp)) if len(pts) > 1 else 0.0
            center = center + d * (proj.max() + proj.min()) / 2 + np.array([-d[1], d[0]]) * (perp.max() + perp.min()) / 2
        cls = "cyclist" if (speed > p.cyclist_speed or length > p.cyclist_length) else "pedestrian"
        pw, pl = p.prior_size[cls]
        radial = None
        if vxy is None and mu_all is not None:
            # strongest return carries the radial constraint
            top = m[int(np.argmax(a))]
            u = np.asarray(mu_all)[top]
            radial = (float(v_r[top]), float(u[0]), float(u[1]))
        support = float(wsum)
        boxes.append(OrientedBox.from_heading(
            float(center[0]), float(center[1]), max(width, pw), max(length, pl), heading, speed,
            cls=cls, score=support / (support + 1.0),
            vxy=None if vxy is None else (float(vxy[0]), float(vxy[1])), vxy_var=vvar,
            radial=radial, support=len(m)))
    return boxes


def _solve_radial(mu, v_r, p: DetectorParams):
    """Full velocity from radial constraints ``mu . v = v_r`` seen from distinct directions.

    Pairs of constraints propose solutions; the one with most inliers is
    refit by least squares. Returns (v, variance) or None when the
    directions do not span the plane well enough.
    """
    n = len(v_r)
    if n < 2:
        return None
    sv = np.linalg.svd(mu, compute_uv=False)
    if sv[-1] < p.min_conditioning * sv[0]:
        return None
    best, best_in = None, None
    for i in range(n):
        for j in range(i + 1, n):
            A = mu[[i, j]]
            if abs(np.linalg.det(A)) < p.min_conditioning:
                continue
            v = np.linalg.solve(A, v_r[[i, j]])
            inl = np.abs(mu @ v - v_r) <= p.radial_inlier_tol
            if best_in is None or inl.sum() > best_in.sum():
                best, best_in = v, inl
    if best is None:
        return None
    A, b = mu[best_in], v_r[best_in]
    sv = np.linalg.svd(A, compute_uv=False)
    if len(b) < 2 or sv[-1] < p.min_conditioning * sv[0]:
        return None
    v = np.linalg.lstsq(A, b, rcond=None)[0]
    var = p.radial_inlier_tol ** 2 * float(np.trace(np.linalg.inv(A.T @ A))) / 2.0
    return v, var


def _cluster_velocity(cands, cand_amp, v_r, motion_unit, virtual, p: DetectorParams):
    """Velocity of one cluster, or (None, None).

    Per-point reconstructions assume motion parallel to the reflecting
    wall, which fails for returns bounced off a wall the object moves
    across. When the cluster's radial constraints span the plane they are
    solved jointly instead; otherwise candidates contradicting a direct
    return are discarded and the candidate that best explains all radial
    velocities is averaged with the candidates agreeing with it.
    """
    if motion_unit is not None:
        solved = _solve_radial(motion_unit, v_r, p)
        if solved is not None:
            return solved
    if len(cands) == 0:
        return None, None
    if motion_unit is not None:
        direct = ~virtual
        if direct.any():
            res = np.abs(v_r[direct][None, :] - cands @ motion_unit[direct].T)
            ok = np.median(res, axis=1) <= p.consistency_cap
            cands, cand_amp = cands[ok], cand_amp[ok]
            if len(cands) == 0:
                return None, None
        if len(cands) > 1:
            res = np.abs(v_r[None, :] - cands @ motion_unit.T)
            best = cands[int(np.argmin(np.minimum(res, p.consistency_cap).sum(axis=1)))]
            agree = np.hypot(*(cands - best).T) <= p.velocity_agreement
            cands, cand_amp = cands[agree], cand_amp[agree]
    w = cand_amp / cand_amp.sum()
    vxy = (w[:, None] * cands).sum(axis=0)
    spread = float((w * np.sum((cands - vxy) ** 2, axis=1)).sum())
    return vxy, spread


# --------------------------------------------------------------------------
# regression targets and losses

def box_residuals(gt: OrientedBox, anchor: OrientedBox) -> tuple[float, ...]:
    """(dx, dy, dv, dw, dl, dtheta) regression residual of ``gt`` w.r.t. ``anchor``."""
    for b in (gt, anchor):
        if not (b.w > 0 and b.l > 0):
            raise ValueError("box sizes must be positive")
    return (gt.x - anchor.x, gt.y - anchor.y, gt.v - anchor.v, math.log(gt.w / anchor.w),
            math.log(gt.l / anchor.l), math.sin(gt.yaw - anchor.yaw))


def localization_loss(residuals, weights=None) -> float:
    """Weighted L1 sum over frames T..T+n of the six residual components."""
    res = np.asarray(residuals, dtype=float).reshape(-1, 6)
    w = np.ones(6) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("loss weights must be non-negative")
    return float(np.sum(np.abs(res) * w))


def classification_loss(probs, labels) -> float:
    """Summed per-anchor cross-entropy of class probabilities (anchors x 3)."""
    probs = np.clip(np.asarray(probs, dtype=float), 1e-12, 1.0)
    labels = np.asarray(labels, dtype=int)
    return float(-np.sum(np.log(probs[np.arange(len(labels)), labels])))


def total_loss(loc: float, cls: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    return alpha * loc + beta * cls
