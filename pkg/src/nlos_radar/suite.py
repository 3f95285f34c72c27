"""The shipped scenario suite and a bundled demo scenario.

Every scene is a cross-street layout: the sensor sits at the origin looking
down +x, a corner building edge hides the cross street, and one or more
relay surfaces on the far side mirror the hidden road user back to the
sensor. Objects walk or ride along the cross street, parallel to the relay,
starting hidden and emerging into view.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .scene import (HiddenObject, PolylineTrajectory, Scenario, SensorConfig, WallSegment, dump_scenario,
                    load_scenario)

FRAME_INTERVAL = 0.1
NOISE_PSD = 5e-9
SIZES = {"pedestrian": (0.6, 0.6), "cyclist": (0.6, 1.8)}
SPEEDS = {"pedestrian": 1.4, "cyclist": 3.5}
RCS = {"pedestrian": 0.1, "cyclist": 1.0}


def _scenario(name, cls, relay, corner, lane_x, y_start, y_end, seed, reflectivity=1.0, extra=(), clutter=()):
    speed = SPEEDS[cls]
    duration = abs(y_end - y_start) / speed
    frames = int(round(duration / FRAME_INTERVAL)) + 1
    t_end = (frames - 1) * FRAME_INTERVAL
    y_final = y_start + np.sign(y_end - y_start) * speed * t_end
    w, l = SIZES[cls]
    traj = PolylineTrajectory(((0.0, lane_x, y_start), (t_end, lane_x, float(y_final))))
    obj = HiddenObject("obj0", cls, w, l, traj, rcs=RCS[cls], num_scatterers=3)
    walls = [WallSegment.from_endpoints(a, b, (0.0, 0.0), id=f"relay{i}") for i, (a, b) in enumerate(relay)]
    walls.append(WallSegment.from_endpoints(*corner, (0.0, 0.0), id="corner"))
    walls += [WallSegment.from_endpoints(a, b, (0.0, 0.0), id=f"extra{i}") for i, (a, b) in enumerate(extra)]
    return Scenario(sensor=SensorConfig(), walls=tuple(walls), objects=(obj,), clutter=tuple(clutter),
                    noise_psd=NOISE_PSD, num_frames=frames, frame_interval=FRAME_INTERVAL, rng_seed=seed,
                    wall_reflectivity=reflectivity, name=name)


def default_suite() -> list[Scenario]:
    """Six scenes: facade, parked cars, guard rail and L-corner relays with both classes."""
    corner = ((6.0, 6.0), (18.0, 6.0))
    return [
        _scenario("facade_pedestrian", "pedestrian", [((30.0, -12.0), (30.0, 16.0))], corner,
                  23.0, 12.2, 4.0, seed=11, clutter=[(29.5, -4.0, 0.05), (17.0, 5.5, 0.05)]),
        _scenario("facade_cyclist", "cyclist", [((38.0, -12.0), (38.0, 18.0))], corner,
                  22.0, 12.0, -4.0, seed=12, clutter=[(37.5, 2.0, 0.05)]),
        _scenario("parked_cars_pedestrian", "pedestrian",
                  [((30.0, -3.0), (30.0, 1.0)), ((30.0, 2.0), (30.0, 6.0)), ((30.0, 7.0), (30.0, 11.0))], corner,
                  26.0, 11.2, 3.0, seed=13, reflectivity=0.8),
        _scenario("guard_rail_cyclist", "cyclist", [((28.0, -10.0), (28.0, 20.0))], corner,
                  24.0, 10.6, -4.0, seed=14, reflectivity=0.6),
        _scenario("l_corner_pedestrian", "pedestrian", [((34.0, -6.0), (34.0, 14.0))], corner,
                  21.0, 12.0, 4.0, seed=15, extra=[((26.0, -6.0), (34.0, -6.0))]),
        _scenario("l_corner_cyclist", "cyclist", [((42.0, -8.0), (42.0, 16.0))], corner,
                  24.0, 12.0, -4.0, seed=16, extra=[((30.0, -8.0), (42.0, -8.0))]),
    ]


def demo_scenario() -> Scenario:
    """Short facade scene: a cyclist hidden for 14 frames, then visible for 10."""
    return _scenario("demo_facade_cyclist", "cyclist", [((38.0, -12.0), (38.0, 18.0))], ((6.0, 6.0), (18.0, 6.0)),
                     22.0, 12.0, 3.95, seed=7, clutter=[(37.5, 2.0, 0.05)])


def wall_standoffs(s: Scenario) -> list[float]:
    """Distance from each hidden object's lane to the nearest relay wall line."""
    out = []
    for o in s.objects:
        p, _ = o.trajectory.state(0.0)
        d = [abs(float(w.normal @ (p - w.p1))) for w in s.walls if w.id.startswith("relay")]
        out.append(min(d))
    return out


def write_suite(out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in default_suite():
        p = out / f"{s.name}.yaml"
        dump_scenario(s, p)
        paths.append(p)
    return paths


def demo_scenario_path() -> Path:
    return Path(str(resources.files("nlos_radar") / "data" / "demo.yaml"))


def load_demo() -> Scenario:
    return load_scenario(demo_scenario_path())
