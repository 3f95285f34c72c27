import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nlos_radar.dsp import PointCloud
from nlos_radar.errors import AmbiguousHalfPlaneError, NoIntersectionError, UnreliableVelocityError
from nlos_radar.geometry import (LidarBev, cloud_from_records, estimate_walls, is_third_bounce, read_lidar_csv,
                                 read_walls_csv, reconstruct_cloud, reconstruct_detection, reconstruct_position,
                                 reconstruct_velocity, reconstruction_records, wall_intersection, write_lidar_csv,
                                 write_walls_csv)
from nlos_radar.scene import Pose2D, Scenario
from nlos_radar.simulator import sample_lidar

from conftest import make_wall

C = np.zeros(2)
WALL = make_wall((5.0, -5.0), (5.0, 5.0), id="relay")


class TestHandExamples:
    def test_intersection(self):
        assert np.allclose(wall_intersection(C, (10, 10), WALL), (5, 5))

    def test_intersection_parallel(self):
        with pytest.raises(NoIntersectionError):
            wall_intersection(C, (0, 3), WALL)

    def test_position(self):
        x_w = wall_intersection(C, (9, 4), WALL)
        assert np.allclose(x_w, (5, 20 / 9))
        assert is_third_bounce(C, (9, 4), x_w, WALL)
        assert np.allclose(reconstruct_position(C, (9, 4), x_w, WALL), (1, 4), atol=1e-12)

    def test_not_third_bounce(self):
        assert not is_third_bounce(C, (3, 1), wall_intersection(C, (3, 1), WALL), WALL)
        # ray crosses the wall line beyond its end
        assert not is_third_bounce(C, (9, 12), wall_intersection(C, (9, 12), WALL), WALL)

    @pytest.mark.parametrize("v_r", [1.0, -1.0])
    def test_velocity(self, v_r):
        x_w = wall_intersection(C, (9, 2), WALL)
        v = reconstruct_velocity((9, 2), x_w, C, WALL, v_r)
        assert np.allclose(v, (0, v_r * math.sqrt(85) / 2))
        assert math.sqrt(85) / 2 == pytest.approx(4.6098, abs=1e-4)

    def test_velocity_unreliable(self):
        x_w = wall_intersection(C, (9, 0.1), WALL)
        with pytest.raises(UnreliableVelocityError):
            reconstruct_velocity((9, 0.1), x_w, C, WALL, 1.0)

    def test_velocity_on_normal(self):
        with pytest.raises(AmbiguousHalfPlaneError):
            reconstruct_velocity((9, 0), (5, 0), C, WALL, 1.0, eps=-1.0)

    def test_detection(self):
        rec = reconstruct_detection(C, (9, 2), 1.0, [WALL])
        assert np.allclose(rec.x, (1, 2))
        assert rec.velocity_valid and np.allclose(rec.v, (0, math.sqrt(85) / 2))
        assert rec.cos_phi == pytest.approx(2 / math.sqrt(85))
        assert reconstruct_detection(C, (3, 2), 1.0, [WALL]) is None

    def test_nearest_wall_wins(self):
        far = make_wall((8.0, -5.0), (8.0, 5.0), id="far")
        rec = reconstruct_detection(C, (12, 1), 0.0, [far, WALL])
        assert rec.wall.id == "relay"


def image_velocity(v, wall):
    return v - 2.0 * (v @ wall.normal) * wall.normal


@settings(max_examples=200, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(4.0, 30.0), st.floats(-0.45, 0.45), st.floats(0.3, 6.0),
       st.floats(-3.0, 3.0))
def test_round_trip_general_wall(alpha, dist, frac, depth, speed):
    # wall at distance ``dist`` with inward normal at angle alpha; object ``depth`` in front of it
    n = np.array([math.cos(alpha), math.sin(alpha)])
    d = np.array([-n[1], n[0]])
    center = dist * n
    wall = make_wall(center - 10 * d, center + 10 * d)
    x = center + frac * 20 * d - depth * n
    x_v = wall.mirror(x)
    x_w = wall_intersection(C, x_v, wall)
    assume(is_third_bounce(C, x_v, x_w, wall))
    assert np.allclose(reconstruct_position(C, x_v, x_w, wall), x, atol=1e-9)
    # path length is preserved
    assert np.hypot(*x_w) + np.hypot(*(x - x_w)) == pytest.approx(np.hypot(*x_v), rel=1e-12)
    v = speed * wall.direction
    u = x_v / np.hypot(*x_v)
    v_r = float(u @ image_velocity(v, wall))
    assume(abs(u @ wall.direction) > 0.05)
    assert np.allclose(reconstruct_velocity(x_v, x_w, C, wall, v_r), v, atol=1e-9)


class TestWallEstimation:
    def test_facade(self):
        s = Scenario(walls=(make_wall((15.0, -2.0), (15.0, 18.0), id="f"),), num_frames=1)
        walls = estimate_walls(LidarBev(sample_lidar(s, 0.0, rng=np.random.default_rng(0))))
        assert len(walls) == 1
        w = walls[0]
        assert abs(w.p1[0] - 15) < 0.05 and abs(w.p2[0] - 15) < 0.05
        assert w.length == pytest.approx(20.0, abs=0.5)
        assert np.allclose(w.normal, (1, 0), atol=0.01)

    def test_gap_preserved(self):
        segs = (make_wall((10.0, 6.0), (14.0, 6.0), id="a"), make_wall((15.5, 6.0), (19.5, 6.0), id="b"))
        s = Scenario(walls=segs, num_frames=1)
        walls = estimate_walls(LidarBev(sample_lidar(s, 0.0, rng=np.random.default_rng(1))))
        assert len(walls) == 2
        assert sorted(round(w.length) for w in walls) == [4, 4]

    def test_empty(self):
        assert estimate_walls(LidarBev(np.zeros((0, 2)))) == []

    def test_short_segment_dropped(self):
        s = Scenario(walls=(make_wall((8.0, 0.0), (8.0, 1.0)),), num_frames=1)
        assert estimate_walls(LidarBev(sample_lidar(s, 0.0)), min_length=1.5) == []

    def test_io(self, tmp_path):
        write_walls_csv(tmp_path / "w.csv", [WALL])
        (w,) = read_walls_csv(tmp_path / "w.csv")
        assert np.array_equal(w.p1, WALL.p1) and np.array_equal(w.normal, WALL.normal) and w.id == "relay"
        bev = LidarBev(np.array([[1.0, 2.0], [3.5, -1.25]]), 0.02)
        write_lidar_csv(tmp_path / "l.csv", bev)
        back = read_lidar_csv(tmp_path / "l.csv")
        assert np.array_equal(back.points, bev.points) and back.bin_size == 0.02


class TestCloud:
    def cloud(self):
        # one direct point at (3, 0) and one virtual point at (9, 2)
        r2 = math.hypot(9, 2)
        return PointCloud([0.0, math.atan2(2, 9)], [3.0, r2], [0.5, 1.0], [4.0, 2.0], timestamp=0.2)

    def test_reconstruct(self):
        rc = reconstruct_cloud(self.cloud(), Pose2D(0, 0, 0), [WALL])
        assert rc.is_virtual.tolist() == [False, True]
        assert np.allclose(rc.position, [[3, 0], [1, 2]])
        assert np.isnan(rc.velocity[0]).all()
        assert np.allclose(rc.velocity[1], (0, math.sqrt(85) / 2))
        assert rc.wall_id == [None, "relay"]
        # mirrored motion direction: radial velocity equals m . v
        assert rc.motion_unit[1] @ rc.velocity[1] == pytest.approx(1.0)

    def test_ego_compensation(self):
        rc = reconstruct_cloud(self.cloud(), Pose2D(0, 0, 0), [WALL], ego_velocity=(1.0, 0.0))
        assert rc.radial_velocity[0] == pytest.approx(1.5)

    def test_records_round_trip(self):
        rc = reconstruct_cloud(self.cloud(), Pose2D(0, 0, 0), [WALL])
        back = cloud_from_records(reconstruction_records(4, rc))
        assert np.array_equal(back.position, rc.position)
        assert np.array_equal(np.isnan(back.velocity), np.isnan(rc.velocity))
        assert back.wall_id == rc.wall_id and back.timestamp == 0.2
        assert np.array_equal(back.motion_unit, rc.motion_unit)

    def test_empty(self):
        rc = reconstruct_cloud(PointCloud.empty(), Pose2D(0, 0, 0), [WALL])
        assert len(rc) == 0


def test_boresight_examples():
    x_w = wall_intersection(C, (9, 0), WALL)
    assert np.allclose(x_w, (5, 0))
    assert is_third_bounce(C, (9, 0), x_w, WALL)
    assert np.allclose(reconstruct_position(C, (9, 0), x_w, WALL), (1, 0))
    assert not is_third_bounce(C, (9, 20), wall_intersection(C, (9, 20), WALL), WALL)


def test_position_is_mirror_image():
    x_w = wall_intersection(C, (9, 4), WALL)
    assert np.allclose(reconstruct_position(C, (9, 4), x_w, WALL), WALL.mirror((9, 4)))


def test_dense_line():
    y = np.arange(-5.0, 5.0 + 1e-9, 0.005)
    bev = LidarBev(np.stack([np.full_like(y, 5.0), y], axis=1))
    (w,) = estimate_walls(bev)
    ends = sorted([tuple(w.p1), tuple(w.p2)], key=lambda p: p[1])
    assert np.allclose(ends, [(5, -5), (5, 5)], atol=2 * bev.bin_size)


def test_random_points_no_walls():
    pts = np.random.default_rng(3).uniform(-20, 20, size=(50, 2))
    assert estimate_walls(LidarBev(pts)) == []


def test_short_dense_line():
    y = np.arange(0.0, 0.8, 0.005)
    assert estimate_walls(LidarBev(np.stack([np.full_like(y, 5.0), y], axis=1))) == []
