import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from nlos_radar.errors import ShapeMismatchError
from nlos_radar.scene import Pose2D, SensorConfig
from nlos_radar.simulator import DIRECT, PropagationPath, RawFrame, synthesize_paths
from nlos_radar.dsp import (PointCloud, RadarCube, RadarPoint, _window_offsets, cfar_detect, os_cfar_mask,
                            os_cfar_pfa, os_cfar_scale, process_frame, range_doppler_angle_transform,
                            read_pointcloud_csv, read_pointcloud_ndjson, to_cartesian, write_pointcloud_csv,
                            write_pointcloud_ndjson)


def path(r, v, ang, amp=1.0):
    return PropagationPath(DIRECT, 2 * r, v, amp, ang, np.zeros(2), np.zeros(2))


def order_stat_pfa(scale, n, k):
    # E[exp(-scale * Y_k)] over the k-th smallest of n unit exponentials
    c = math.exp(special.gammaln(n + 1) - special.gammaln(k) - special.gammaln(n - k + 1))
    f = lambda y: c * (1 - math.exp(-y)) ** (k - 1) * math.exp(-y * (n - k + 1)) * math.exp(-scale * y)
    return integrate.quad(f, 0, np.inf, epsabs=1e-14, epsrel=1e-10)[0]


class TestOsCfarThreshold:
    @pytest.mark.parametrize("scale", [1.0, 5.0, 12.3])
    def test_pfa_matches_order_statistic_integral(self, scale):
        assert os_cfar_pfa(scale, 16, 12) == pytest.approx(order_stat_pfa(scale, 16, 12), rel=1e-8)

    @given(st.floats(1e-8, 0.5), st.integers(4, 32))
    def test_scale_inverts_pfa(self, pfa, n):
        k = max(1, int(round(0.75 * n)))
        s = os_cfar_scale(pfa, n, k)
        assert os_cfar_pfa(s, n, k) == pytest.approx(pfa, rel=1e-6)

    def test_bad_pfa(self):
        with pytest.raises(ValueError):
            os_cfar_scale(0.0, 16, 12)

    def test_window_offsets(self):
        off = _window_offsets(16, 2, 2)
        assert off.tolist() == [-17, -15, -13, -11, -9, -7, -5, -3, 3, 5, 7, 9, 11, 13, 15, 17]
        assert _window_offsets(4, 1, 1).tolist() == [-3, -2, 2, 3]
        with pytest.raises(ValueError):
            _window_offsets(15, 2)
        with pytest.raises(ValueError):
            _window_offsets(4, 4)

    def test_mask_flags_spike(self):
        rng = np.random.default_rng(1)
        p = rng.exponential(size=(256, 4))
        p[100, 2] = 1e4
        m = os_cfar_mask(p, 1e-6)
        assert m[100, 2]
        assert m.sum() <= 3

    def test_mask_false_alarm_rate(self):
        rng = np.random.default_rng(2)
        p = rng.exponential(size=(512, 1024))
        rate = os_cfar_mask(p, 1e-2).mean()
        assert rate == pytest.approx(1e-2, rel=0.1)


class TestTransform:
    cfg = SensorConfig(num_rx_antennas=8, num_angle_bins=64)

    def test_single_target(self):
        r, v, ang = 30.0, 1.0, math.radians(20)
        raw = synthesize_paths(self.cfg, [path(r, v, ang)])
        cube = range_doppler_angle_transform(raw, self.cfg)
        pc = cfar_detect(cube, pfa=1e-6)
        i = int(np.argmax(pc.amplitude))
        assert pc.range[i] == pytest.approx(r, abs=self.cfg.range_resolution / 2)
        assert pc.radial_velocity[i] == pytest.approx(v, abs=self.cfg.velocity_resolution / 2)
        assert pc.azimuth[i] == pytest.approx(ang, abs=math.radians(3))

    def test_peak_bin(self):
        raw = synthesize_paths(self.cfg, [path(30.0, 0.0, 0.0)])
        cube = range_doppler_angle_transform(raw, self.cfg)
        R, A, V = cube.shape
        assert (R, A, V) == (1024, 64, 64)
        d = cube.dense()
        r, a, v = np.unravel_index(np.argmax(d), d.shape)
        assert (r, a, v) == (200, A // 2, V // 2)

    def test_exact_power_matches_spectra(self):
        raw = synthesize_paths(self.cfg, [path(12.0, -0.5, 0.3)])
        cube = range_doppler_angle_transform(raw, self.cfg)
        rr, vv = np.nonzero(cube.gate_index >= 0)
        a = np.arange(cube.shape[1])
        for r, v in list(zip(rr, vv))[:5]:
            assert np.allclose(cube.exact_power(r, a, v), cube.power_at(r, a, v), rtol=1e-3, atol=1e-6)

    def test_dense_mean_is_rd_power(self):
        # Parseval: ungated cells hold the angle-mean power
        raw = synthesize_paths(self.cfg, [path(12.0, -0.5, 0.3)])
        cube = range_doppler_angle_transform(raw, self.cfg, gate_factor=0.0)
        assert np.allclose(cube.dense().mean(axis=1), cube.rd_power, rtol=1e-3)

    def test_shape_mismatch(self):
        bad = RawFrame(np.zeros((2, 2, 2), np.complex64), 0.0)
        with pytest.raises(ShapeMismatchError):
            range_doppler_angle_transform(bad, self.cfg)

    def test_suppress_static(self):
        raw = synthesize_paths(self.cfg, [path(20.0, 0.0, 0.0), path(40.0, 1.5, 0.2)])
        pc = process_frame(raw, self.cfg, suppress_static=True)
        assert np.all(np.abs(pc.radial_velocity) >= self.cfg.velocity_resolution)
        assert np.any(np.abs(pc.range - 40.0) < 0.2)

    def test_max_points(self):
        raw = synthesize_paths(self.cfg, [path(10.0 + 5 * i, 0.2 * i - 1, 0.1 * i - 0.3) for i in range(6)])
        pc = cfar_detect(range_doppler_angle_transform(raw, self.cfg), max_points=3)
        assert len(pc) == 3


class TestPointCloud:
    def cloud(self):
        return PointCloud([0.1, -0.2], [5.0, 7.5], [0.3, -1.0], [10.0, 2.5], timestamp=0.4)

    def test_csv_round_trip(self, tmp_path):
        pc = self.cloud()
        write_pointcloud_csv(tmp_path / "a.csv", pc)
        back = read_pointcloud_csv(tmp_path / "a.csv")
        assert back.points == pc.points and back.timestamp == 0.4

    def test_ndjson_round_trip(self, tmp_path):
        pc = self.cloud()
        write_pointcloud_ndjson(tmp_path / "a.ndjson", pc)
        back = read_pointcloud_ndjson(tmp_path / "a.ndjson")
        assert back.points == pc.points and back.timestamp == 0.4

    def test_empty(self, tmp_path):
        write_pointcloud_ndjson(tmp_path / "e.ndjson", PointCloud.empty(1.5))
        assert len(read_pointcloud_ndjson(tmp_path / "e.ndjson")) == 0

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_pointcloud_csv(tmp_path / "x.csv")

    def test_size_limit(self):
        z = np.zeros(10_000)
        with pytest.raises(ValueError):
            PointCloud(z, z, z, z + 1)

    def test_log_amplitude(self):
        assert RadarPoint(0, 1, 0, math.e).log_amplitude == pytest.approx(1.0)

    @settings(max_examples=50)
    @given(st.floats(-1.2, 1.2), st.floats(0.5, 100), st.floats(-math.pi, math.pi))
    def test_cartesian(self, az, r, yaw):
        pose = Pose2D(2.0, -1.0, yaw)
        x, y = to_cartesian(RadarPoint(az, r, 0.0, 1.0), pose)
        assert math.hypot(x - 2.0, y + 1.0) == pytest.approx(r)
        bearing = math.atan2(y + 1.0, x - 2.0)
        assert abs(math.remainder(bearing - yaw - az, 2 * math.pi)) < 1e-9
        pc = PointCloud([az], [r], [0.0], [1.0])
        assert np.allclose(pc.cartesian(pose)[0], (x, y))


def test_from_dense_round_trip():
    p = np.random.default_rng(0).exponential(size=(64, 8, 4)).astype(np.float32)
    cube = RadarCube.from_dense(p)
    assert np.array_equal(cube.dense(), p)
    assert cube.shape == (64, 8, 4)


def test_velocity_peak_two_bins():
    cfg = SensorConfig(num_rx_antennas=8, num_angle_bins=64)
    raw = synthesize_paths(cfg, [path(30.0, 2 * cfg.velocity_resolution, 0.0)])
    d = range_doppler_angle_transform(raw, cfg).dense()
    _, _, v = np.unravel_index(np.argmax(d), d.shape)
    assert v - d.shape[2] // 2 == 2


def test_all_zero_cube_is_empty():
    cfg = SensorConfig(num_rx_antennas=8, num_angle_bins=64)
    raw = RawFrame(np.zeros((8, 64, 1024), np.complex64), 0.0)
    assert len(cfar_detect(range_doppler_angle_transform(raw, cfg))) == 0


def test_injected_target_single_cluster():
    rng = np.random.default_rng(4)
    p = rng.exponential(size=(256, 16, 16)).astype(np.float32)
    p[120, 5, 9] = 100.0                          # 20 dB over the unit noise floor
    cube = RadarCube.from_dense(p, SensorConfig(num_rx_antennas=8, num_angle_bins=16, num_chirps=16),
                                noise_floor=1.0)
    mask = os_cfar_mask(p, 1e-6)
    from scipy import ndimage
    lab, n = ndimage.label(mask)
    assert n == 1 and lab[120, 5, 9] > 0
    pc = cfar_detect(cube, pfa=1e-6, angle_dynamic_range_db=None)
    assert len(pc) == 1


@pytest.mark.parametrize("az,r,yaw", [(0.0, 10.0, 0.0), (math.pi / 2, 10.0, 0.0), (math.pi / 6, 20.0, math.pi / 2)])
def test_to_cartesian_examples(az, r, yaw):
    rot = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
    want = rot @ np.array([r * math.cos(az), r * math.sin(az)])
    assert np.allclose(to_cartesian(RadarPoint(az, r, 0.0, 1.0), Pose2D(0, 0, yaw)), want, atol=1e-12)
    if yaw == math.pi / 2:
        assert np.allclose(want, (-10.0, 10 * math.sqrt(3)))
