import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from nlos_radar.detection import (DetectorParams, OrientedBox, box_from_record, box_residuals, classification_loss,
                                  detect, localization_loss, min_area_rectangle, rasterize, total_loss,
                                  wrap_half_pi)
from nlos_radar.geometry import ReconstructedCloud

finite = st.floats(-20, 20, allow_nan=False)
size = st.floats(0.1, 5.0)
angle = st.floats(-3 * math.pi, 3 * math.pi)


def box_strategy():
    return st.builds(OrientedBox, finite, finite, size, size, angle, st.floats(-5, 5))


def cloud(pos, v_r, vel=None, virtual=None, amp=None):
    pos = np.asarray(pos, dtype=float)
    n = len(pos)
    u = pos / np.hypot(pos[:, 0], pos[:, 1])[:, None]
    vel = np.full((n, 2), np.nan) if vel is None else np.asarray(vel, dtype=float)
    valid = ~np.isnan(vel).any(axis=1)
    return ReconstructedCloud(pos, vel, np.asarray(v_r, dtype=float), np.ones(n) if amp is None else amp,
                              np.zeros(n, bool) if virtual is None else np.asarray(virtual), valid, [None] * n,
                              pos.copy(), u)


class TestRasterize:
    def test_max_magnitude_velocity(self):
        img = rasterize([(10.01, 0.01, 1.0, 0.5), (10.05, 0.05, -2.0, 0.2)])
        r, c = 100, 300
        assert img.grid[0, r, c] == -2.0
        assert img.grid[1, r, c] == 0.5
        assert img.grid.shape == (2, 800, 600)

    def test_outside_ignored(self):
        img = rasterize([(-1.0, 0.0, 1.0, 1.0), (100.0, 0.0, 1.0, 1.0)])
        assert not img.grid.any()

    @given(st.lists(st.tuples(st.floats(0, 7.99), st.floats(-3, 2.99), st.floats(-3, 3), st.floats(0, 5)),
                    min_size=1, max_size=40))
    def test_conservation(self, pts):
        # every occupied cell holds one of its points' values; the strongest amplitude overall survives
        img = rasterize(pts, roi=(0.0, -3.0, 8.0, 6.0), cell_size=0.5)
        arr = np.array(pts)
        assert img.grid[1].max() == pytest.approx(arr[:, 3].max()) or arr[:, 3].max() == 0
        vals = set(arr[:, 2].tolist()) | {0.0}
        assert set(np.unique(img.grid[0]).tolist()) <= vals
        assert np.abs(img.grid[0]).max() == pytest.approx(np.abs(arr[:, 2]).max())
        assert np.count_nonzero(img.grid.any(axis=0)) <= len(pts)

    def test_bad_roi(self):
        with pytest.raises(ValueError):
            rasterize([], cell_size=0.0)


class TestBoxes:
    def test_yaw_wrapped(self):
        b = OrientedBox(0, 0, 1, 2, math.pi * 0.75, 1.0)
        assert -math.pi / 2 <= b.yaw < math.pi / 2

    def test_from_heading_sign(self):
        b = OrientedBox.from_heading(0, 0, 0.6, 1.8, math.pi, 2.0)
        assert b.yaw == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(b.velocity_vector, (-2.0, 0.0))

    def test_bad_size(self):
        with pytest.raises(ValueError):
            OrientedBox(0, 0, 0.0, 1.0)

    def test_record_round_trip(self):
        b = OrientedBox(1.0, 2.0, 0.6, 1.8, 0.3, 1.5, "cyclist", 0.8, 4, vxy=(1.0, 0.5), vxy_var=0.1,
                        radial=(0.5, 1.0, 0.0), support=3)
        assert box_from_record(b.to_record(7, extended=True)) == b
        assert list(b.to_record(7)) == ["frame", "id", "class", "score", "x", "y", "w", "l", "theta", "v"]

    def test_min_area_rectangle(self):
        pts = np.array([[0, 0], [2, 0], [2, 1], [0, 1], [1, 0.5]])
        center, length, width, yaw = min_area_rectangle(pts)
        assert np.allclose(center, (1, 0.5)) and length == pytest.approx(2) and width == pytest.approx(1)
        assert abs(math.sin(yaw)) < 1e-9
        assert min_area_rectangle([[0, 0], [1, 1], [2, 2]]) is None


class TestLosses:
    def test_width_log(self):
        anchor = OrientedBox(0, 0, 1.0, 2.0)
        res = box_residuals(OrientedBox(0, 0, 2.0, 2.0), anchor)
        assert res[3] == pytest.approx(math.log(2)) and res[3] == pytest.approx(0.6931, abs=1e-4)

    def test_l1(self):
        assert localization_loss([(1, -1, 0.5, 0, 0, 0)]) == 2.5
        assert localization_loss([(1, -1, 0.5, 0, 0, 0)] * 2) == 5.0
        with pytest.raises(ValueError):
            localization_loss([(1, 0, 0, 0, 0, 0)], weights=[-1, 1, 1, 1, 1, 1])

    @given(box_strategy(), box_strategy())
    def test_residual_antisymmetry(self, a, b):
        assert np.allclose(box_residuals(a, b), -np.array(box_residuals(b, a)), atol=1e-9)

    @given(box_strategy(), box_strategy())
    def test_residual_half_turn(self, a, b):
        flipped = OrientedBox(a.x, a.y, a.w, a.l, a.yaw + math.pi, a.v)
        assert np.allclose(box_residuals(flipped, b), box_residuals(a, b), atol=1e-9)

    def test_classification(self):
        probs = [[0.1, 0.2, 0.7], [0.5, 0.25, 0.25]]
        assert classification_loss(probs, [2, 0]) == pytest.approx(-math.log(0.7) - math.log(0.5))
        assert total_loss(2.0, 3.0, alpha=0.5, beta=2.0) == 7.0

    @given(angle)
    def test_wrap_half_pi(self, t):
        w = wrap_half_pi(t)
        assert -math.pi / 2 <= w < math.pi / 2
        assert abs(math.sin(w - t)) < 1e-9


class TestDetect:
    def test_three_points_one_pedestrian(self):
        pts = [(10.0, 0.0), (10.2, 0.1), (10.1, -0.1)]
        c = cloud(pts, [1.2, 1.2, 1.2])
        (box,) = detect(c)
        assert box.cls == "pedestrian"
        poly = Polygon(box.corners())
        assert all(poly.buffer(1e-9).contains(Point(p)) for p in pts)
        assert box.radial is not None

    def test_static_points_dropped(self):
        assert detect(cloud([(10.0, 0.0), (10.1, 0.0)], [0.0, 0.05])) == []

    def test_two_clusters(self):
        pts = [(10.0, 0.0), (10.2, 0.0), (20.0, 5.0), (20.1, 5.2)]
        boxes = detect(cloud(pts, [1.0, 1.0, -1.0, -1.0]))
        assert len(boxes) == 2

    def test_fast_is_cyclist(self):
        pts = [(10.0, 0.0), (10.1, 0.1)]
        vel = [(3.5, 0.0), (3.5, 0.0)]
        (box,) = detect(cloud(pts, [3.5, 3.5], vel=vel, virtual=[True, True]))
        assert box.cls == "cyclist"
        assert np.allclose(box.vxy, (3.5, 0.0))
        assert box.l >= 1.8 and box.w >= 0.6

    def test_joint_radial_solve(self):
        # two direct returns seen from different directions fix the full velocity
        v = np.array([0.5, 1.5])
        pts = np.array([[6.0, 0.0], [6.0 * math.cos(0.45), 6.0 * math.sin(0.45)]])
        pts = pts - pts.mean(axis=0) + (8.0, 1.5)
        u = pts / np.hypot(pts[:, 0], pts[:, 1])[:, None]
        c = cloud(pts, u @ v)
        (box,) = detect(c, DetectorParams(eps=5.0))
        assert np.allclose(box.vxy, v, atol=1e-9)

    def test_empty(self):
        assert detect(cloud(np.zeros((0, 2)) + 1, [])) == []
