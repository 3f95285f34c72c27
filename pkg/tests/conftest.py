import numpy as np
import pytest

from nlos_radar.scene import HiddenObject, PolylineTrajectory, Scenario, SensorConfig, WallSegment

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(lines):
        terminalreporter.write_line(lines[k])


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; printed at the end of the run."""
    store = request.config.stash[ACCEPTANCE_KEY]

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        store[number] = line
        print(line)
        return ok

    return record


@pytest.fixture
def sensor():
    return SensorConfig()


def make_wall(a, b, sensor=(0.0, 0.0), id="w"):
    return WallSegment.from_endpoints(a, b, sensor, id=id)


@pytest.fixture
def facade_scene():
    """Object walking behind a corner, mirrored by a wall at x=5 (small noiseless scene)."""
    relay = make_wall((5.0, -5.0), (5.0, 5.0), id="relay")
    block = make_wall((0.5, -0.6), (0.5, 0.6), id="block")
    obj = HiddenObject("p", "pedestrian", 0.6, 0.6, PolylineTrajectory(((0.0, 1.0, 0.0),)), rcs=0.1,
                       num_scatterers=1)
    return Scenario(walls=(relay, block), objects=(obj,), num_frames=1, rng_seed=3)


def rng_points(seed, n, lo, hi):
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 2))
