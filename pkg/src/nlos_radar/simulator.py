"""Chirp-sequence FMCW measurement synthesis for direct and third-bounce paths."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError
from .scene import (SPEED_OF_LIGHT, Scenario, SensorConfig, WallSegment, line_of_sight_blocked,
                    object_state_at, segments_intersect)

DIRECT = "direct"
THIRD_BOUNCE = "third_bounce"


@dataclass(frozen=True)
class PropagationPath:
    kind: str
    total_length: float
    radial_velocity: float
    amplitude: float
    incident_angle: float
    virtual_position: np.ndarray
    scatterer: np.ndarray
    legs: tuple = ()
    object_id: str | None = None
    wall_id: str | None = None

    @property
    def range(self) -> float:
        """One-way range seen by the radar (half the round-trip length)."""
        return self.total_length / 2.0


@dataclass(frozen=True)
class RawFrame:
    samples: np.ndarray  # (rx antenna, chirp, fast-time sample), complex64
    timestamp: float


def emitted_chirp(cfg: SensorConfig, t):
    """Transmitted linear sweep cos(2 pi f_c t + pi (B/T_m) t^2), 0 <= t <= T_m."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > cfg.ramp_time):
        raise ValueError("t outside the frequency ramp [0, T_m]")
    return np.cos(chirp_phase(cfg, t))


def chirp_phase(cfg: SensorConfig, t):
    return 2.0 * np.pi * cfg.carrier_frequency * t + np.pi * cfg.chirp_slope * np.square(t)


def instantaneous_frequency(cfg: SensorConfig, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > cfg.ramp_time):
        raise ValueError("t outside the frequency ramp [0, T_m]")
    return cfg.carrier_frequency + cfg.chirp_slope * t


def beat_frequency(cfg: SensorConfig, r: float) -> float:
    return cfg.chirp_slope * 2.0 * r / SPEED_OF_LIGHT


def _heading(vel) -> float:
    return math.atan2(vel[1], vel[0]) if np.hypot(*vel) > 1e-9 else 0.0


def sample_scatterers(obj, pos, vel, rng) -> list[tuple[np.ndarray, float]]:
    """Point scatterers on the object footprint as (position, rcs) pairs.

    Without an rng a single scatterer sits at the footprint center.
    """
    if rng is None:
        return [(np.asarray(pos, dtype=float), obj.rcs)]
    n = obj.num_scatterers
    local = (rng.random((n, 2)) - 0.5) * np.array([obj.length, obj.width])
    h = _heading(vel)
    c, s = math.cos(h), math.sin(h)
    world = local @ np.array([[c, s], [-s, c]]) + pos
    return [(p, obj.rcs / n) for p in world]


def _specular_point(c, x, wall: WallSegment):
    """Point on the wall segment mirroring x toward c, or None."""
    side = float(wall.normal @ (x - wall.p1))
    if side >= 0:  # object not on the sensor side of the wall line
        return None
    image = wall.mirror(x)
    d = image - c
    denom = float(d @ wall.normal)
    if denom <= 0:
        return None
    s = float(wall.normal @ (wall.p1 - c)) / denom
    xw = c + s * d
    u = float((xw - wall.p1) @ wall.direction)
    if not 0.0 < u < wall.length:
        return None
    return xw, image


def enumerate_paths(scenario: Scenario, t: float, rng=None, check_leg_occlusion=True) -> list[PropagationPath]:
    """All direct and third-bounce paths present at time ``t``.

    Clutter points only contribute direct returns. Paths outside the field of
    view or beyond the unambiguous range are dropped.
    """
    cfg = scenario.sensor
    pose = scenario.sensor_pose_at(t)
    c = pose.position
    v_ego = np.array(scenario.ego_velocity)
    walls = scenario.walls
    rho2 = scenario.wall_reflectivity ** 2
    max_r = min(cfg.max_range, cfg.num_range_bins * cfg.range_resolution)
    paths = []

    def add(kind, xv, x, v_image, rcs, amp_scale, legs=(), oid=None, wid=None, total=None):
        los = xv - c
        r = float(np.hypot(*los))
        if r == 0.0:
            return
        u = los / r
        total = 2.0 * r if total is None else total
        if total / 2.0 > max_r:
            return
        ang = float((math.atan2(u[1], u[0]) - pose.yaw + math.pi) % (2 * math.pi) - math.pi)
        if abs(ang) > cfg.fov_azimuth / 2.0:
            return
        paths.append(PropagationPath(kind, total, float((v_image - v_ego) @ u),
                                     cfg.gain * amp_scale * rcs / r ** 4, ang,
                                     np.asarray(xv, dtype=float), np.asarray(x, dtype=float),
                                     legs, oid, wid))

    for obj in scenario.objects:
        pos, vel = object_state_at(scenario, obj.id, t)
        for x, rcs in sample_scatterers(obj, pos, vel, rng):
            if not line_of_sight_blocked(c, x, walls):
                add(DIRECT, x, x, vel, rcs, 1.0, oid=obj.id)
            for wall in walls:
                hit = _specular_point(c, x, wall)
                if hit is None:
                    continue
                xw, image = hit
                if check_leg_occlusion and (line_of_sight_blocked(c, xw, walls, exclude=(wall,))
                                            or line_of_sight_blocked(xw, x, walls, exclude=(wall,))):
                    continue
                r1 = float(np.hypot(*(xw - c)))
                r2 = float(np.hypot(*(x - xw)))
                v_img = vel - 2.0 * float(vel @ wall.normal) * wall.normal
                add(THIRD_BOUNCE, image, x, v_img, rcs, rho2, legs=(xw,), oid=obj.id, wid=wall.id,
                    total=2.0 * r1 + 2.0 * r2)
    for x, y, rcs in scenario.clutter:
        p = np.array([x, y])
        if not line_of_sight_blocked(c, p, walls):
            add(DIRECT, p, p, np.zeros(2), rcs, 1.0)
    return paths


def path_signal_factors(cfg: SensorConfig, path: PropagationPath):
    """Per-antenna, per-chirp and fast-time complex factors of one path's beat signal."""
    r = path.range
    lam = cfg.wavelength
    n = np.arange(cfg.num_samples_per_chirp)
    fast = 2.0 * np.pi * beat_frequency(cfg, r) * n / cfg.sample_rate
    fast += 4.0 * np.pi * cfg.carrier_frequency * r / SPEED_OF_LIGHT
    theta = 4.0 * np.pi * cfg.chirp_period * path.radial_velocity / lam
    dphi = 2.0 * np.pi * cfg.antenna_spacing * math.sin(path.incident_angle) / lam
    ant = (path.amplitude / 2.0) * np.exp(1j * dphi * np.arange(cfg.num_rx_antennas))
    chirp = np.exp(1j * theta * np.arange(cfg.num_chirps))
    return ant, chirp, np.exp(1j * fast)


def frame_rng(scenario: Scenario, frame_index: int):
    """Independent (scatterer, noise, lidar) generators for one frame."""
    seq = np.random.SeedSequence([scenario.rng_seed, frame_index])
    return [np.random.default_rng(s) for s in seq.spawn(3)]


def synthesize_paths(cfg: SensorConfig, paths, timestamp=0.0) -> RawFrame:
    shape = (cfg.num_rx_antennas, cfg.num_chirps, cfg.num_samples_per_chirp)
    out = np.zeros(shape, dtype=np.complex64)
    # one path at a time in list order, so frames add up exactly
    for p in paths:
        ant, chirp, fast = path_signal_factors(cfg, p)
        slow = np.multiply.outer(ant, chirp).astype(np.complex64)
        out += np.multiply.outer(slow, fast.astype(np.complex64))
    return RawFrame(out, timestamp)


def add_noise(frame: RawFrame, cfg: SensorConfig, noise_psd: float, rng) -> RawFrame:
    if noise_psd <= 0:
        return frame
    sigma = math.sqrt(noise_psd * cfg.sample_rate / 2.0)
    noise = rng.standard_normal((2,) + frame.samples.shape, dtype=np.float32)
    samples = frame.samples + sigma * (noise[0] + 1j * noise[1]).astype(np.complex64)
    return RawFrame(samples.astype(np.complex64), frame.timestamp)


def synthesize_frame(scenario: Scenario, frame_index: int, noise=True, paths=None) -> RawFrame:
    """Mixed, low-pass filtered receive samples for one chirp sequence."""
    t = scenario.frame_time(frame_index)
    scat_rng, noise_rng, _ = frame_rng(scenario, frame_index)
    if paths is None:
        paths = enumerate_paths(scenario, t, rng=scat_rng)
    frame = synthesize_paths(scenario.sensor, paths, t)
    if noise:
        frame = add_noise(frame, scenario.sensor, scenario.noise_psd, noise_rng)
    return frame


def noise_variance(scenario: Scenario) -> float:
    """Complex per-sample noise power."""
    return scenario.noise_psd * scenario.sensor.sample_rate


# --------------------------------------------------------------------------
# raw frame dump: one text header line, then little-endian complex64 samples

RAW_MAGIC = "NLOSRAW"


def write_raw_frame(path, frame: RawFrame, config_hash: str = "") -> None:
    shape = ",".join(str(s) for s in frame.samples.shape)
    header = f"{RAW_MAGIC} v1 shape={shape} dtype=<c8 timestamp={frame.timestamp!r} config={config_hash}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(frame.samples, dtype="<c8").tobytes())


def read_raw_frame(path) -> tuple[RawFrame, dict]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    fields = data[:nl].decode("ascii").split()
    if fields[0] != RAW_MAGIC:
        raise ShapeMismatchError(f"{path} is not a raw frame dump")
    meta = dict(f.split("=", 1) for f in fields[2:])
    shape = tuple(int(s) for s in meta["shape"].split(","))
    samples = np.frombuffer(data[nl + 1:], dtype=meta["dtype"])
    if samples.size != int(np.prod(shape)):
        raise ShapeMismatchError("raw frame payload does not match header shape")
    return RawFrame(samples.reshape(shape).astype(np.complex64), float(meta["timestamp"])), meta


# --------------------------------------------------------------------------
# idealized first-response lidar

def sample_lidar(scenario: Scenario, t: float, rng=None, angular_step=None, max_range=None,
                 range_noise=None):
    """Ray-cast the walls from the sensor and return world-frame hit points (N, 2)."""
    cfg = scenario.lidar or {}
    step = math.radians(cfg.get("angular_step_deg", 0.25)) if angular_step is None else angular_step
    max_range = cfg.get("max_range", 80.0) if max_range is None else max_range
    range_noise = cfg.get("range_noise", 0.005) if range_noise is None else range_noise
    fov = math.radians(cfg.get("fov_deg", 145.0))
    pose = scenario.sensor_pose_at(t)
    c = pose.position
    angles = pose.yaw + np.arange(-fov / 2, fov / 2 + 1e-12, step)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    best = np.full(len(angles), np.inf)
    for w in scenario.walls:
        e = w.p2 - w.p1
        denom = dirs[:, 0] * e[1] - dirs[:, 1] * e[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            q = w.p1 - c
            s = (q[0] * e[1] - q[1] * e[0]) / denom
            u = (q[0] * dirs[:, 1] - q[1] * dirs[:, 0]) / denom
        ok = (np.abs(denom) > 1e-12) & (s > 0) & (u >= 0) & (u <= 1)
        best = np.where(ok & (s < best), s, best)
    hit = np.isfinite(best) & (best <= max_range)
    rng_ = best[hit]
    if rng is not None and range_noise > 0:
        rng_ = rng_ + rng.normal(0.0, range_noise, rng_.shape)
    return c + dirs[hit] * rng_[:, None]


__all__ = [
    "DIRECT", "THIRD_BOUNCE", "PropagationPath", "RawFrame", "emitted_chirp", "instantaneous_frequency",
    "beat_frequency", "enumerate_paths", "synthesize_frame", "synthesize_paths", "add_noise",
    "write_raw_frame", "read_raw_frame", "sample_lidar", "segments_intersect", "noise_variance",
]
