"""World model: sensor, walls, hidden road users and the scenario file format.

All geometry is 2D bird's-eye view in meters. The sensor boresight is the
local +x axis and azimuth grows counterclockwise.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import ScenarioError

SPEED_OF_LIGHT = 299_792_458.0

OBJECT_CLASSES = ("pedestrian", "cyclist")
MAX_OBJECT_SPEED = 15.0
MIN_WALL_LENGTH = 1.0


def wrap_angle(a):
    """Map an angle (or array of angles) to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi if np.ndim(a) else (a + math.pi) % (2.0 * math.pi) - math.pi


def cross2(a, b):
    """2D cross product a1*b2 - a2*b1."""
    return a[0] * b[1] - a[1] * b[0]


def rot90(v):
    """Rotate a 2D vector by +pi/2 (counterclockwise)."""
    return np.array([-v[1], v[0]], dtype=float)


@dataclass(frozen=True)
class SensorConfig:
    """Chirp-sequence FMCW radar parameters.

    Defaults reproduce the mid-range automotive configuration: 0.15 m range
    bins, 0.087 m/s velocity bins, a 22.6 ms chirp sequence, 64 virtual
    receive channels at half-wavelength spacing and a 1024 x 512 x 64 cube.
    ``gain`` is the radar constant multiplying rcs / distance**4 amplitudes.
    """

    carrier_frequency: float = 76.0e9
    bandwidth: float = 1.0e9
    ramp_time: float = 20.0e-6
    chirp_period: float = 22.6e-3 / 64
    num_chirps: int = 64
    num_samples_per_chirp: int = 1024
    num_rx_antennas: int = 64
    antenna_spacing: float | None = None
    max_range: float = 153.0
    fov_azimuth: float = math.radians(140.0)
    num_angle_bins: int = 512
    gain: float = 2.0e6

    def __post_init__(self):
        if not (self.carrier_frequency > 0 and self.bandwidth > 0):
            raise ScenarioError("carrier frequency and bandwidth must be positive", "sensor")
        if self.antenna_spacing is None:
            object.__setattr__(self, "antenna_spacing", self.wavelength / 2.0)
        if not 0 < self.ramp_time <= self.chirp_period:
            raise ScenarioError("need 0 < ramp_time <= chirp_period", "sensor.ramp_time")
        if self.antenna_spacing > self.wavelength / 2.0 * (1 + 1e-12):
            raise ScenarioError("antenna spacing above half a wavelength aliases angles",
                                "sensor.antenna_spacing")
        for name in ("num_chirps", "num_samples_per_chirp", "num_rx_antennas", "num_angle_bins"):
            if int(getattr(self, name)) < 2:
                raise ScenarioError("must be at least 2", f"sensor.{name}")
        if self.num_angle_bins < self.num_rx_antennas:
            raise ScenarioError("angle bins must not be fewer than antennas", "sensor.num_angle_bins")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def chirp_slope(self) -> float:
        return self.bandwidth / self.ramp_time

    @property
    def sample_rate(self) -> float:
        return self.num_samples_per_chirp / self.ramp_time

    @property
    def range_resolution(self) -> float:
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    @property
    def velocity_resolution(self) -> float:
        return self.wavelength / (2.0 * self.num_chirps * self.chirp_period)

    @property
    def angle_resolution(self) -> float:
        # boresight beamwidth of the uniform array
        return self.wavelength / (self.num_rx_antennas * self.antenna_spacing)

    @property
    def max_unambiguous_velocity(self) -> float:
        return self.wavelength / (4.0 * self.chirp_period)

    @property
    def frame_duration(self) -> float:
        return self.num_chirps * self.chirp_period

    @property
    def num_range_bins(self) -> int:
        return self.num_samples_per_chirp

    @property
    def cube_shape(self) -> tuple[int, int, int]:
        return (self.num_range_bins, self.num_angle_bins, self.num_chirps)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", float(wrap_angle(float(self.yaw))))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def to_world(self, local_xy) -> np.ndarray:
        """Rigid transform of sensor-frame points (..., 2) to the world frame."""
        local_xy = np.asarray(local_xy, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local_xy @ rot.T + self.position

    def to_local(self, world_xy) -> np.ndarray:
        world_xy = np.asarray(world_xy, dtype=float)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return (world_xy - self.position) @ rot


@dataclass(frozen=True)
class PolylineTrajectory:
    """Keyframed track ``((t, x, y), ...)`` with linear interpolation."""

    keyframes: tuple

    def __post_init__(self):
        kf = tuple(tuple(float(v) for v in k) for k in self.keyframes)
        if len(kf) < 1 or any(len(k) != 3 for k in kf):
            raise ScenarioError("keyframes must be a non-empty list of [t, x, y]")
        if any(b[0] <= a[0] for a, b in zip(kf, kf[1:])):
            raise ScenarioError("keyframe times must be strictly increasing")
        object.__setattr__(self, "keyframes", kf)

    @property
    def span(self) -> tuple[float, float]:
        # a single keyframe is a parked object present from its time onward
        if len(self.keyframes) == 1:
            return self.keyframes[0][0], math.inf
        return self.keyframes[0][0], self.keyframes[-1][0]

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        kf = self.keyframes
        if len(kf) == 1:
            return np.array(kf[0][1:]), np.zeros(2)
        times = [k[0] for k in kf]
        i = int(np.searchsorted(times, t, side="right")) - 1
        i = min(max(i, 0), len(kf) - 2)
        (t0, x0, y0), (t1, x1, y1) = kf[i], kf[i + 1]
        vel = np.array([(x1 - x0) / (t1 - t0), (y1 - y0) / (t1 - t0)])
        pos = np.array([x0, y0]) + vel * (t - t0)
        return pos, vel

    def max_speed(self) -> float:
        kf = self.keyframes
        speeds = [math.hypot(b[1] - a[1], b[2] - a[2]) / (b[0] - a[0]) for a, b in zip(kf, kf[1:])]
        return max(speeds, default=0.0)

    def to_dict(self) -> dict:
        return {"keyframes": [list(k) for k in self.keyframes]}


@dataclass(frozen=True)
class ArcTrajectory:
    """Circular arc: center + radius * (cos, sin)(phase + rate * (t - t0))."""

    center: tuple
    radius: float
    phase: float
    rate: float
    t0: float
    t1: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.radius <= 0 or self.t1 <= self.t0:
            raise ScenarioError("arc needs positive radius and t1 > t0")

    @property
    def span(self) -> tuple[float, float]:
        return self.t0, self.t1

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        ang = self.phase + self.rate * (t - self.t0)
        pos = np.array(self.center) + self.radius * np.array([math.cos(ang), math.sin(ang)])
        vel = self.radius * self.rate * np.array([-math.sin(ang), math.cos(ang)])
        return pos, vel

    def max_speed(self) -> float:
        return abs(self.radius * self.rate)

    def to_dict(self) -> dict:
        return {"arc": {"center": list(self.center), "radius": self.radius, "phase": self.phase,
                        "rate": self.rate, "t0": self.t0, "t1": self.t1}}


@dataclass(frozen=True)
class HiddenObject:
    id: str
    cls: str
    width: float
    length: float
    trajectory: PolylineTrajectory | ArcTrajectory
    rcs: float = 0.1
    num_scatterers: int = 3

    def __post_init__(self):
        if self.cls not in OBJECT_CLASSES:
            raise ScenarioError(f"unknown object class {self.cls!r}", f"objects.{self.id}.class")
        if self.width <= 0 or self.length <= 0:
            raise ScenarioError("footprint must be positive", f"objects.{self.id}")
        if self.trajectory.max_speed() >= MAX_OBJECT_SPEED:
            raise ScenarioError("object faster than 15 m/s", f"objects.{self.id}.trajectory")
        if not 1 <= self.num_scatterers <= 5:
            raise ScenarioError("num_scatterers must be within 1..5", f"objects.{self.id}.scatterers")
        if self.rcs <= 0:
            raise ScenarioError("rcs must be positive", f"objects.{self.id}.rcs")


@dataclass(frozen=True)
class WallSegment:
    """Relay wall line segment.

    ``normal`` points away from the sensor and ``direction`` (unit p2 - p1)
    is the normal rotated by +pi/2.
    """

    p1: np.ndarray
    p2: np.ndarray
    normal: np.ndarray
    id: str = ""

    @classmethod
    def from_endpoints(cls, a, b, sensor=(0.0, 0.0), id: str = "") -> "WallSegment":
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        c = np.asarray(sensor, dtype=float)
        d = b - a
        length = float(np.hypot(*d))
        if length < MIN_WALL_LENGTH:
            raise ScenarioError(f"wall shorter than {MIN_WALL_LENGTH} m", f"walls.{id}")
        d /= length
        n = np.array([d[1], -d[0]])
        side = float(n @ ((a + b) / 2.0 - c))
        if side == 0.0:
            raise ScenarioError("sensor lies on the wall line", f"walls.{id}")
        if side < 0:
            n = -n
            a, b = b, a
        return cls(a, b, n, id)

    @property
    def direction(self) -> np.ndarray:
        return rot90(self.normal)

    @property
    def vector(self) -> np.ndarray:
        return self.p2 - self.p1

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.p2 - self.p1)))

    @property
    def midpoint(self) -> np.ndarray:
        return (self.p1 + self.p2) / 2.0

    def mirror(self, x) -> np.ndarray:
        """Reflect a point across the (infinite) wall line."""
        x = np.asarray(x, dtype=float)
        return x - 2.0 * float(self.normal @ (x - self.p1)) * self.normal

    def __eq__(self, other):
        if not isinstance(other, WallSegment):
            return NotImplemented
        return (np.array_equal(self.p1, other.p1) and np.array_equal(self.p2, other.p2)
                and np.array_equal(self.normal, other.normal) and self.id == other.id)

    __hash__ = None


def segments_intersect(a, b, p, q) -> bool:
    """True iff closed segments a-b and p-q share at least one point."""
    d1 = cross2(q - p, a - p)
    d2 = cross2(q - p, b - p)
    d3 = cross2(b - a, p - a)
    d4 = cross2(b - a, q - a)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True

    def on_seg(u, v, w):
        return min(u[0], v[0]) <= w[0] <= max(u[0], v[0]) and min(u[1], v[1]) <= w[1] <= max(u[1], v[1])

    return ((d1 == 0 and on_seg(p, q, a)) or (d2 == 0 and on_seg(p, q, b))
            or (d3 == 0 and on_seg(a, b, p)) or (d4 == 0 and on_seg(a, b, q)))


def line_of_sight_blocked(c, x, walls: Sequence[WallSegment], exclude=()) -> bool:
    """Whether the straight segment c-x touches any wall (endpoint touch included)."""
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    for w in walls:
        if any(w is e for e in exclude):
            continue
        if segments_intersect(c, x, w.p1, w.p2):
            return True
    return False


@dataclass(frozen=True)
class Scenario:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    pose: Pose2D = field(default_factory=Pose2D)
    walls: tuple = ()
    objects: tuple = ()
    clutter: tuple = ()  # ((x, y, rcs), ...) static scatterers
    noise_psd: float = 0.0
    num_frames: int = 1
    frame_interval: float = 0.1
    rng_seed: int = 0
    ego_velocity: tuple = (0.0, 0.0)
    wall_reflectivity: float = 1.0
    name: str = "scenario"
    lidar: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "clutter", tuple(tuple(float(v) for v in p) for p in self.clutter))
        object.__setattr__(self, "ego_velocity", tuple(float(v) for v in self.ego_velocity))
        if self.num_frames < 1:
            raise ScenarioError("need at least one frame", "frames.count")
        if self.frame_interval < self.sensor.frame_duration:
            raise ScenarioError("frame interval shorter than one chirp sequence", "frames.interval")
        if self.noise_psd < 0:
            raise ScenarioError("noise psd must be non-negative", "noise_psd")
        if not 0.0 <= self.wall_reflectivity <= 1.0:
            raise ScenarioError("wall reflectivity must lie in [0, 1]", "wall_reflectivity")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioError("duplicate object id", "objects")
        c = self.pose.position
        for w in self.walls:
            if float(w.normal @ (w.midpoint - c)) <= 0:
                raise ScenarioError("wall normal must point away from the sensor", f"walls.{w.id}")

    @property
    def duration(self) -> float:
        return (self.num_frames - 1) * self.frame_interval

    def frame_time(self, frame_index: int) -> float:
        if not 0 <= frame_index < self.num_frames:
            raise IndexError(f"frame {frame_index} outside 0..{self.num_frames - 1}")
        return frame_index * self.frame_interval

    def sensor_pose_at(self, t: float) -> Pose2D:
        vx, vy = self.ego_velocity
        return Pose2D(self.pose.x + vx * t, self.pose.y + vy * t, self.pose.yaw)

    def object(self, object_id) -> HiddenObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(f"unknown object id {object_id!r}")

    def occlusion_warnings(self) -> list[str]:
        """Objects that are visible at t=0 or never occluded during the run."""
        out = []
        for o in self.objects:
            vis = [not line_of_sight_blocked(self.sensor_pose_at(t).position,
                                             object_state_at(self, o.id, t)[0], self.walls)
                   for t in np.arange(self.num_frames) * self.frame_interval]
            if all(vis):
                out.append(f"object {o.id} is never occluded")
            elif vis[0]:
                out.append(f"object {o.id} is visible at t=0")
        return out

    def config_hash(self) -> str:
        text = json.dumps(scenario_to_dict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def object_state_at(scenario: Scenario, object_id, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Position and velocity of a hidden object at time ``t``."""
    obj = scenario.object(object_id)
    t0, t1 = obj.trajectory.span
    lo, hi = max(0.0, t0), min(scenario.duration + scenario.frame_interval, t1)
    if not lo - 1e-12 <= t <= hi + 1e-12:
        raise ValueError(f"t={t} outside [{lo}, {hi}] for object {object_id!r}")
    return obj.trajectory.state(t)


# --------------------------------------------------------------------------
# scenario files

def _compose_with_lines(text: str):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                            line=mark.line + 1 if mark else None) from None
    lines: dict[str, int] = {}

    def walk(n, path):
        lines[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                walk(v, f"{path}.{k.value}" if path else k.value)
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                walk(v, f"{path}.{i}")

    if node is not None:
        walk(node, "")
    return yaml.safe_load(text), lines


class _Reader:
    def __init__(self, lines):
        self.lines = lines

    def fail(self, msg, path):
        raise ScenarioError(msg, field=path, line=self._line(path))

    def _line(self, path):
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path.rpartition(".")[0]
        return self.lines.get("")

    def get(self, d, key, path, kind=float, default=...):
        full = f"{path}.{key}" if path else key
        if not isinstance(d, dict):
            self.fail("expected a mapping", path)
        if key not in d:
            if default is ...:
                self.fail("missing required field", full)
            return default
        try:
            if kind is float:
                return float(d[key])
            if kind is int:
                v = d[key]
                if isinstance(v, bool) or float(v) != int(v):
                    raise ValueError
                return int(v)
            if kind == "point":
                v = [float(u) for u in d[key]]
                if len(v) != 2:
                    raise ValueError
                return v
            return kind(d[key])
        except (TypeError, ValueError):
            self.fail(f"invalid value {d[key]!r}", full)


def scenario_from_dict(doc: dict, lines: dict | None = None) -> Scenario:
    r = _Reader(lines or {})
    if not isinstance(doc, dict):
        r.fail("scenario document must be a mapping", "")
    sensor_doc = doc.get("sensor", {}) or {}
    try:
        sensor_kw = {}
        for k, f in SensorConfig.__dataclass_fields__.items():
            if k in sensor_doc:
                kind = int if f.type == "int" else float
                sensor_kw[k] = r.get(sensor_doc, k, "sensor", kind)
        unknown = set(sensor_doc) - set(SensorConfig.__dataclass_fields__)
        if unknown:
            r.fail(f"unknown sensor fields {sorted(unknown)}", "sensor")
        sensor = SensorConfig(**sensor_kw)
    except ScenarioError as exc:
        if exc.line is None:
            raise ScenarioError(str(exc).split(" (")[0], exc.field, r._line(exc.field or "sensor")) from None
        raise
    pose_doc = doc.get("pose", {}) or {}
    pose = Pose2D(r.get(pose_doc, "x", "pose", default=0.0), r.get(pose_doc, "y", "pose", default=0.0),
                  r.get(pose_doc, "yaw", "pose", default=0.0))
    walls = []
    for i, wd in enumerate(doc.get("walls", []) or []):
        path = f"walls.{i}"
        wid = str(wd.get("id", f"w{i}")) if isinstance(wd, dict) else ""
        p1 = r.get(wd, "p1", path, "point")
        p2 = r.get(wd, "p2", path, "point")
        try:
            walls.append(WallSegment.from_endpoints(p1, p2, pose.position, id=wid))
        except ScenarioError as exc:
            r.fail(str(exc).split(" (")[0], path)
    objects = []
    for i, od in enumerate(doc.get("objects", []) or []):
        path = f"objects.{i}"
        oid = str(r.get(od, "id", path, str))
        tdoc = r.get(od, "trajectory", path, dict)
        try:
            if "arc" in tdoc:
                a = tdoc["arc"]
                ap = f"{path}.trajectory.arc"
                traj = ArcTrajectory(r.get(a, "center", ap, "point"), r.get(a, "radius", ap),
                                     r.get(a, "phase", ap), r.get(a, "rate", ap),
                                     r.get(a, "t0", ap), r.get(a, "t1", ap))
            else:
                traj = PolylineTrajectory(tuple(tuple(k) for k in r.get(tdoc, "keyframes", f"{path}.trajectory", list)))
            objects.append(HiddenObject(oid, r.get(od, "class", path, str), r.get(od, "width", path),
                                        r.get(od, "length", path), traj, r.get(od, "rcs", path, default=0.1),
                                        r.get(od, "scatterers", path, int, default=3)))
        except ScenarioError as exc:
            if exc.line is None:
                r.fail(str(exc).split(" (")[0], exc.field if exc.field and exc.field.startswith(path) else path)
            raise
    clutter = []
    for i, cd in enumerate(doc.get("clutter", []) or []):
        try:
            x, y, rcs = (float(v) for v in cd)
        except (TypeError, ValueError):
            r.fail("clutter entries must be [x, y, rcs]", f"clutter.{i}")
        clutter.append((x, y, rcs))
    frames = doc.get("frames", {}) or {}
    try:
        return Scenario(
            sensor=sensor, pose=pose, walls=tuple(walls), objects=tuple(objects), clutter=tuple(clutter),
            noise_psd=r.get(doc, "noise_psd", "", default=0.0),
            num_frames=r.get(frames, "count", "frames", int, default=1),
            frame_interval=r.get(frames, "interval", "frames", default=0.1),
            rng_seed=r.get(doc, "seed", "", int, default=0),
            ego_velocity=tuple(r.get(doc, "ego_velocity", "", "point", default=[0.0, 0.0])),
            wall_reflectivity=r.get(doc, "wall_reflectivity", "", default=1.0),
            name=str(doc.get("name", "scenario")),
            lidar=dict(doc.get("lidar", {}) or {}),
        )
    except ScenarioError as exc:
        if exc.line is None:
            raise ScenarioError(str(exc).split(" (")[0], exc.field, r._line(exc.field or "")) from None
        raise


def scenario_to_dict(s: Scenario) -> dict:
    out = {
        "name": s.name,
        "seed": s.rng_seed,
        "sensor": {k: v for k, v in s.sensor.to_dict().items()},
        "pose": {"x": s.pose.x, "y": s.pose.y, "yaw": s.pose.yaw},
        "ego_velocity": list(s.ego_velocity),
        "noise_psd": s.noise_psd,
        "wall_reflectivity": s.wall_reflectivity,
        "frames": {"count": s.num_frames, "interval": s.frame_interval},
        "walls": [{"id": w.id, "p1": [float(v) for v in w.p1], "p2": [float(v) for v in w.p2]} for w in s.walls],
        "objects": [{"id": o.id, "class": o.cls, "width": o.width, "length": o.length, "rcs": o.rcs,
                     "scatterers": o.num_scatterers, "trajectory": o.trajectory.to_dict()} for o in s.objects],
        "clutter": [list(p) for p in s.clutter],
    }
    if s.lidar:
        out["lidar"] = dict(s.lidar)
    return out


def load_scenario(path) -> Scenario:
    text = Path(path).read_text()
    doc, lines = _compose_with_lines(text)
    return scenario_from_dict(doc, lines)


def loads_scenario(text: str) -> Scenario:
    doc, lines = _compose_with_lines(text)
    return scenario_from_dict(doc, lines)


def dump_scenario(s: Scenario, path=None) -> str:
    text = yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text
