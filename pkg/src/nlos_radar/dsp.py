"""Range/Doppler/angle processing, OS-CFAR detection and point cloud I/O."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft
from scipy.ndimage import maximum_filter
from scipy.optimize import brentq

from .errors import ShapeMismatchError
from .scene import Pose2D, SensorConfig
from .simulator import RawFrame

MAX_POINTS = 9999
# Hann-windowed neighbours are correlated (|rho|^2 = 0.44 at lag 1, 0.03 at lag 2);
# sampling every second bin keeps the reference cells close to independent
REF_STRIDE = 2
POINTCLOUD_FORMAT = "nlos-radar/pointcloud"
POINTCLOUD_VERSION = 1
POINT_FIELDS = ("timestamp", "azimuth", "range", "radial_velocity", "amplitude")


@dataclass
class RadarCube:
    """Power cube over (range, angle, velocity) bins.

    Angle spectra are stored for gated range-velocity cells only; every other
    cell holds its angle-averaged power, which by Parseval is the mean of its
    (uncomputed) zero-padded angle spectrum. ``rd`` keeps the windowed
    range-Doppler-antenna data so any single cell can be evaluated exactly.
    """

    rd_power: np.ndarray          # (R, V) angle-mean power
    gate_index: np.ndarray        # (R, V) row into ``spectra`` or -1
    spectra: np.ndarray           # (G, A) power of gated cells
    cfg: SensorConfig | None = None
    rd: np.ndarray | None = None  # (R, V, M) complex, antenna window applied
    noise_floor: float = 1.0

    @classmethod
    def from_dense(cls, power, cfg=None, noise_floor=None):
        """Wrap a full (R, A, V) power array."""
        power = np.asarray(power, dtype=np.float32)
        R, A, V = power.shape
        spectra = np.ascontiguousarray(power.transpose(0, 2, 1).reshape(R * V, A))
        gate = np.arange(R * V, dtype=np.int64).reshape(R, V)
        nf = float(np.median(power)) if noise_floor is None else noise_floor
        return cls(power.mean(axis=1), gate, spectra, cfg, None, nf if nf > 0 else 1.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        R, V = self.rd_power.shape
        return (R, self.spectra.shape[1] if self.spectra.size else self._angle_bins(), V)

    def _angle_bins(self):
        return self.cfg.num_angle_bins if self.cfg is not None else 0

    @property
    def range_scale(self) -> float:
        return self.cfg.range_resolution

    @property
    def velocity_scale(self) -> float:
        return self.cfg.velocity_resolution

    @property
    def angle_scale(self) -> float:
        """Angle bin width at boresight (rad/bin)."""
        return self.cfg.wavelength / (self.shape[1] * self.cfg.antenna_spacing)

    def sin_azimuth(self, angle_bin):
        A = self.shape[1]
        return (np.asarray(angle_bin, dtype=float) - A / 2) * self.cfg.wavelength / (A * self.cfg.antenna_spacing)

    def velocity_of(self, velocity_bin):
        return (np.asarray(velocity_bin, dtype=float) - self.shape[2] / 2) * self.velocity_scale

    def power_at(self, r, a, v):
        """Stored cube values at integer bin indices (broadcasting)."""
        r, a, v = np.broadcast_arrays(np.asarray(r), np.asarray(a), np.asarray(v))
        g = self.gate_index[r, v]
        out = self.rd_power[r, v].astype(np.float32, copy=True)
        m = g >= 0
        if np.any(m):
            out[m] = self.spectra[g[m], a[m]]
        return out

    def exact_power(self, r, a, v):
        """Angle-DFT power evaluated directly from the range-Doppler data."""
        if self.rd is None:
            return self.power_at(r, a, v)
        r, a, v = np.broadcast_arrays(np.asarray(r), np.asarray(a), np.asarray(v))
        A = self.shape[1]
        M = self.rd.shape[2]
        k = (a - A // 2) % A
        steer = np.exp(-2j * np.pi * np.outer(k.ravel(), np.arange(M)) / A)
        x = self.rd[r.ravel(), v.ravel()]
        val = np.abs(np.sum(x * steer, axis=1)) ** 2
        return val.reshape(r.shape).astype(np.float32)

    def dense(self) -> np.ndarray:
        R, A, V = self.shape
        out = np.repeat(self.rd_power[:, None, :], A, axis=1)
        rr, vv = np.nonzero(self.gate_index >= 0)
        out[rr, :, vv] = self.spectra[self.gate_index[rr, vv]]
        return out


def range_doppler_angle_transform(raw: RawFrame, cfg: SensorConfig, gate_factor: float = 1.5) -> RadarCube:
    """Hann-windowed range, Doppler and zero-padded angle FFTs.

    Angle spectra are computed for range-velocity cells whose antenna-summed
    power exceeds ``gate_factor`` times the frame median.
    """
    x = raw.samples
    expected = (cfg.num_rx_antennas, cfg.num_chirps, cfg.num_samples_per_chirp)
    if x.shape != expected:
        raise ShapeMismatchError(f"raw frame shape {x.shape} != {expected}")
    M, K, N = expected
    w_fast = np.hanning(N).astype(np.float32)
    w_slow = np.hanning(K).astype(np.float32)
    w_ant = np.hanning(M).astype(np.float32)
    rng_fft = scipy.fft.fft(x * w_fast, n=cfg.num_range_bins, axis=2)
    rd = scipy.fft.fft(rng_fft * w_slow[:, None], axis=1)
    rd = scipy.fft.fftshift(rd, axes=1)
    rd = np.ascontiguousarray(rd.transpose(2, 1, 0)) * w_ant      # (R, V, M)
    rd_power = np.einsum("rvm,rvm->rv", rd.real, rd.real) + np.einsum("rvm,rvm->rv", rd.imag, rd.imag)
    floor = float(np.median(rd_power))
    gate_mask = rd_power > gate_factor * floor if floor > 0 else rd_power > 0
    rr, vv = np.nonzero(gate_mask)
    gate_index = np.full(rd_power.shape, -1, dtype=np.int64)
    gate_index[rr, vv] = np.arange(len(rr))
    A = cfg.num_angle_bins
    if len(rr):
        spec = scipy.fft.fftshift(scipy.fft.fft(rd[rr, vv], n=A, axis=1), axes=1)
        spectra = (spec.real ** 2 + spec.imag ** 2).astype(np.float32)
    else:
        spectra = np.zeros((0, A), dtype=np.float32)
    return RadarCube(rd_power.astype(np.float32), gate_index, spectra, cfg, rd.astype(np.complex64),
                     floor if floor > 0 else 1.0)


# --------------------------------------------------------------------------
# OS-CFAR

def os_cfar_pfa(scale: float, n: int, k: int) -> float:
    """False-alarm probability of OS-CFAR in exponential noise."""
    i = np.arange(k)
    return float(np.exp(np.sum(np.log(n - i) - np.log(n - i + scale))))


def os_cfar_scale(pfa: float, n: int, k: int) -> float:
    """Threshold multiplier on the k-th order statistic achieving ``pfa``."""
    if not 0 < pfa < 1:
        raise ValueError("pfa must lie in (0, 1)")
    f = lambda s: math.log(os_cfar_pfa(s, n, k)) - math.log(pfa)
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    return brentq(f, 0.0, hi, xtol=1e-12)


def _window_offsets(window: int, guard: int, stride: int = 1) -> np.ndarray:
    if window <= guard or guard < 0:
        raise ValueError("need window > guard >= 0")
    if window < 2 or window % 2:
        raise ValueError("window must be a positive even number of reference cells")
    if stride < 1:
        raise ValueError("reference stride must be at least 1")
    half = window // 2
    # window/2 reference cells on each side, beyond the guard cells, every ``stride`` bins
    lead = -(guard + 1 + stride * np.arange(half))[::-1]
    return np.concatenate([lead, -lead[::-1]])


def _fold_offsets(r, offsets, n_range):
    """Reference-cell indices along range; cells beyond an edge continue on the other side."""
    span = 2 * int(offsets.max()) + 1
    idx = r[..., None] + offsets
    idx = np.where(idx < 0, idx + span, idx)
    idx = np.where(idx >= n_range, idx - span, idx)
    return idx


def _order_k(window, guard, k):
    n = window
    if k is None:
        k = int(round(0.75 * n))
    if not 1 <= k <= n:
        raise ValueError("order statistic index out of range")
    return n, k


def os_cfar_mask(power: np.ndarray, pfa: float, window: int = 16, guard: int = 2, k: int | None = None,
                 stride: int = REF_STRIDE, chunk: int = 1 << 18) -> np.ndarray:
    """Cell-wise OS-CFAR along axis 0 of a dense power array.

    ``window`` reference cells are split evenly between both sides of the
    cell under test, each half separated from it by ``guard`` cells and
    spaced ``stride`` bins apart.
    """
    power = np.asarray(power)
    n_range = power.shape[0]
    offsets = _window_offsets(window, guard, stride)
    n, k = _order_k(window, guard, k)
    if n_range < 2 * int(offsets.max()) + 2:
        raise ValueError("range axis shorter than the CFAR window")
    scale = os_cfar_scale(pfa, n, k)
    flat = power.reshape(n_range, -1)
    out = np.zeros(flat.shape, dtype=bool)
    idx = _fold_offsets(np.arange(n_range), offsets, n_range)      # (R, n)
    step = max(1, chunk // (n_range * n))
    for j in range(0, flat.shape[1], step):
        block = flat[:, j:j + step]
        ref = block[idx]                                          # (R, n, cols)
        kth = np.partition(ref, k - 1, axis=1)[:, k - 1, :]
        out[:, j:j + step] = block > scale * kth
    return out.reshape(power.shape)


@dataclass(frozen=True)
class RadarPoint:
    azimuth: float
    range: float
    radial_velocity: float
    amplitude: float

    @property
    def log_amplitude(self) -> float:
        return math.log(self.amplitude)


@dataclass
class PointCloud:
    """Sparse detections stored column-wise."""

    azimuth: np.ndarray
    range: np.ndarray
    radial_velocity: np.ndarray
    amplitude: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("azimuth", "range", "radial_velocity", "amplitude"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if len(self) >= 10_000:
            raise ValueError("point cloud must hold fewer than 10^4 points")

    @classmethod
    def empty(cls, timestamp=0.0):
        e = np.zeros(0)
        return cls(e, e, e, e, timestamp)

    @classmethod
    def from_points(cls, points, timestamp=0.0):
        pts = list(points)
        if not pts:
            return cls.empty(timestamp)
        return cls([p.azimuth for p in pts], [p.range for p in pts], [p.radial_velocity for p in pts],
                   [p.amplitude for p in pts], timestamp)

    def __len__(self):
        return len(self.range)

    @property
    def points(self) -> list[RadarPoint]:
        return [RadarPoint(*vals) for vals in zip(self.azimuth.tolist(), self.range.tolist(),
                                                  self.radial_velocity.tolist(), self.amplitude.tolist())]

    @property
    def log_amplitude(self) -> np.ndarray:
        return np.log(self.amplitude)

    def cartesian(self, pose: Pose2D) -> np.ndarray:
        local = np.stack([self.range * np.cos(self.azimuth), self.range * np.sin(self.azimuth)], axis=1)
        return pose.to_world(local)


def _parabolic(lm, l0, lp):
    den = lm - 2.0 * l0 + lp
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den < 0, 0.5 * (lm - lp) / den, 0.0)
    return np.clip(d, -0.5, 0.5)


def cfar_detect(cube: RadarCube, pfa: float = 1e-6, window: int = 16, guard: int = 2, k: int | None = None,
                max_points: int = MAX_POINTS, suppress_static: bool = False,
                peak_grouping: bool = True, angle_dynamic_range_db: float | None = 25.0,
                stride: int = REF_STRIDE) -> PointCloud:
    """OS-CFAR along range for every (velocity, angle) slice, then point extraction.

    With ``peak_grouping`` only cells that are also local maxima of their
    3x3x3 neighbourhood become points, one per target peak. Peaks more than
    ``angle_dynamic_range_db`` below the strongest angle bin of the
    surrounding range-Doppler cells are taken as angle sidelobes and
    dropped (None keeps them). Bin positions are
    refined by 3-point parabolic interpolation of the log power in each axis.
    Amplitudes are reported relative to the frame noise floor.
    """
    cfg = cube.cfg
    R, A, V = cube.shape
    offsets = _window_offsets(window, guard, stride)
    n, k = _order_k(window, guard, k)
    if R < 2 * int(offsets.max()) + 2:
        raise ValueError("range axis shorter than the CFAR window")
    scale = os_cfar_scale(pfa, n, k)
    g_r, g_v = np.nonzero(cube.gate_index >= 0)
    if len(g_r) == 0:
        return PointCloud.empty()
    spec = cube.spectra[cube.gate_index[g_r, g_v]]                   # (G, A)
    if peak_grouping:
        left = np.roll(spec, 1, axis=1)
        right = np.roll(spec, -1, axis=1)
        gi, ai = np.nonzero((spec > left) & (spec >= right) & (spec > 0))
    else:
        gi, ai = np.nonzero(spec > 0)
    r, v, a = g_r[gi], g_v[gi], ai
    val = spec[gi, ai]
    if peak_grouping and len(r):
        keep = np.ones(len(r), dtype=bool)
        for dr in (-1, 0, 1):
            for dv in (-1, 0, 1):
                if dr == 0 and dv == 0:
                    continue
                rr = r + dr
                ok = (rr >= 0) & (rr < R)
                rr = np.clip(rr, 0, R - 1)
                vv = (v + dv) % V
                for da in (-1, 0, 1):
                    nb = cube.power_at(rr, (a + da) % A, vv)
                    strict = (dr, dv, da) < (0, 0, 0)
                    beat = (val > nb) if strict else (val >= nb)
                    keep &= beat | ~ok
        r, v, a, val = r[keep], v[keep], a[keep], val[keep]
    if len(r) == 0:
        return PointCloud.empty()
    ref_idx = _fold_offsets(r, offsets, R)
    ref = cube.power_at(ref_idx, a[:, None], v[:, None])
    kth = np.partition(ref, k - 1, axis=1)[:, k - 1]
    det = val > scale * kth
    if angle_dynamic_range_db is not None:
        rv_max = np.zeros((R, V))
        rv_max[g_r, g_v] = cube.spectra[cube.gate_index[g_r, g_v]].max(axis=1)
        rv_max = maximum_filter(rv_max, size=3, mode=("nearest", "wrap"))
        det &= val >= rv_max[r, v] * 10.0 ** (-angle_dynamic_range_db / 10.0)
    r, v, a, val = r[det], v[det], a[det], val[det]
    if len(r) == 0:
        return PointCloud.empty()

    def lg(p):
        return np.log(np.maximum(p, 1e-30))

    l0 = lg(val)
    dr = _parabolic(lg(cube.exact_power(np.maximum(r - 1, 0), a, v)), l0,
                    lg(cube.exact_power(np.minimum(r + 1, R - 1), a, v)))
    dr = np.where((r > 0) & (r < R - 1), dr, 0.0)
    dv = _parabolic(lg(cube.exact_power(r, a, (v - 1) % V)), l0, lg(cube.exact_power(r, a, (v + 1) % V)))
    da = _parabolic(lg(cube.exact_power(r, (a - 1) % A, v)), l0, lg(cube.exact_power(r, (a + 1) % A, v)))
    rng = (r + dr) * cfg.range_resolution
    vel = cube.velocity_of(v + dv)
    s = cube.sin_azimuth(a + da)
    valid = (np.abs(s) <= 1.0)
    az = np.arcsin(np.clip(s, -1.0, 1.0))
    valid &= (rng > 0) & (rng <= cfg.max_range) & (np.abs(az) <= cfg.fov_azimuth / 2)
    valid &= np.abs(vel) <= cfg.max_unambiguous_velocity
    if suppress_static:
        valid &= np.abs(vel) >= cfg.velocity_resolution
    amp = val / cube.noise_floor
    az, rng, vel, amp = az[valid], rng[valid], vel[valid], amp[valid]
    if len(amp) > max_points:
        top = np.sort(np.argsort(-amp, kind="stable")[:max_points])
        az, rng, vel, amp = az[top], rng[top], vel[top], amp[top]
    order = np.lexsort((az, rng))
    return PointCloud(az[order], rng[order], vel[order], amp[order])


def to_cartesian(p: RadarPoint, sensor_pose: Pose2D) -> tuple[float, float]:
    """Sensor polar coordinates to world (x, y); azimuth 0 is boresight."""
    xy = sensor_pose.to_world([p.range * math.cos(p.azimuth), p.range * math.sin(p.azimuth)])
    return float(xy[0]), float(xy[1])


def process_frame(raw: RawFrame, cfg: SensorConfig, pfa: float = 1e-6, suppress_static: bool = False,
                  **cfar_kw) -> PointCloud:
    cube = range_doppler_angle_transform(raw, cfg)
    pc = cfar_detect(cube, pfa=pfa, suppress_static=suppress_static, **cfar_kw)
    pc.timestamp = raw.timestamp
    return pc


# --------------------------------------------------------------------------
# serialization

def write_pointcloud_csv(path, pc: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {POINTCLOUD_FORMAT} v{POINTCLOUD_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(POINT_FIELDS)
        for az, r, v, amp in zip(pc.azimuth.tolist(), pc.range.tolist(), pc.radial_velocity.tolist(),
                                 pc.amplitude.tolist()):
            w.writerow([repr(float(pc.timestamp)), repr(az), repr(r), repr(v), repr(amp)])


def read_pointcloud_csv(path) -> PointCloud:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith(f"# {POINTCLOUD_FORMAT} v"):
            raise ValueError(f"{path}: missing point cloud header")
        version = int(header.strip().rsplit("v", 1)[1])
        if version != POINTCLOUD_VERSION:
            raise ValueError(f"{path}: unsupported point cloud version {version}")
        rows = list(csv.DictReader(fh))
    if not rows:
        ts = 0.0
        return PointCloud.empty(ts)
    cols = {f: np.array([float(row[f]) for row in rows]) for f in POINT_FIELDS}
    return PointCloud(cols["azimuth"], cols["range"], cols["radial_velocity"], cols["amplitude"],
                      float(cols["timestamp"][0]))


def write_pointcloud_ndjson(path, pc: PointCloud) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": POINTCLOUD_FORMAT, "version": POINTCLOUD_VERSION,
                             "timestamp": pc.timestamp, "count": len(pc)}) + "\n")
        for p in pc.points:
            fh.write(json.dumps({"azimuth": p.azimuth, "range": p.range,
                                 "radial_velocity": p.radial_velocity, "amplitude": p.amplitude}) + "\n")


def read_pointcloud_ndjson(path) -> PointCloud:
    with open(path) as fh:
        head = json.loads(fh.readline())
        if head.get("format") != POINTCLOUD_FORMAT or head.get("version") != POINTCLOUD_VERSION:
            raise ValueError(f"{path}: unsupported point cloud format")
        pts = [RadarPoint(**json.loads(line)) for line in fh if line.strip()]
    return PointCloud.from_points(pts, head.get("timestamp", 0.0))
