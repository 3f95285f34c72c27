import math

import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, settings
from hypothesis import strategies as st

from nlos_radar.errors import ShapeMismatchError
from nlos_radar.scene import HiddenObject, PolylineTrajectory, Scenario, SensorConfig
from nlos_radar.simulator import (DIRECT, THIRD_BOUNCE, PropagationPath, RawFrame, add_noise, beat_frequency,
                                  chirp_phase, emitted_chirp, enumerate_paths, instantaneous_frequency,
                                  path_signal_factors, read_raw_frame, sample_lidar, synthesize_frame,
                                  synthesize_paths, write_raw_frame)

from conftest import make_wall

SMALL = SensorConfig(num_samples_per_chirp=64, num_chirps=16, num_rx_antennas=8, num_angle_bins=16)


def static_object(x, y, rcs=0.1, id="p"):
    return HiddenObject(id, "pedestrian", 0.6, 0.6, PolylineTrajectory(((0.0, x, y),)), rcs=rcs,
                        num_scatterers=1)


def point_path(r, v=0.0, ang=0.0, amp=1.0):
    return PropagationPath(DIRECT, 2 * r, v, amp, ang, np.array([r, 0.0]), np.array([r, 0.0]))


class TestChirp:
    def test_phase_exact_cycles(self, sensor):
        # f_c t + slope t^2 / 2 in exact rationals: 760000 + 2500 cycles
        slope = Fraction(10 ** 9) / Fraction(2, 10 ** 5)
        t = Fraction(1, 10 ** 5)
        cycles = Fraction(76 * 10 ** 9) * t + slope * t * t / 2
        assert cycles == 762500
        assert chirp_phase(sensor, 1e-5) / (2 * math.pi) == pytest.approx(762500, abs=1e-6)
        assert emitted_chirp(sensor, 1e-5) == pytest.approx(1.0, abs=1e-6)

    def test_instantaneous_frequency(self, sensor):
        assert instantaneous_frequency(sensor, 0.0) == pytest.approx(76e9)
        assert instantaneous_frequency(sensor, sensor.ramp_time) == pytest.approx(77e9)
        # derivative of the phase over 2 pi
        h = 1e-12
        num = (chirp_phase(sensor, 1e-5 + h) - chirp_phase(sensor, 1e-5 - h)) / (4 * math.pi * h)
        assert num == pytest.approx(instantaneous_frequency(sensor, 1e-5), rel=1e-6)

    @pytest.mark.parametrize("t", [-1e-9, 2.1e-5])
    def test_outside_ramp(self, sensor, t):
        with pytest.raises(ValueError):
            emitted_chirp(sensor, t)
        with pytest.raises(ValueError):
            instantaneous_frequency(sensor, t)

    def test_beat_frequency_30m(self, sensor):
        fb = beat_frequency(sensor, 30.0)
        assert fb == pytest.approx(10.007e6, rel=1e-4)
        assert round(fb * sensor.num_samples_per_chirp / sensor.sample_rate) == 200

    def test_beat_peak_bin(self, sensor):
        _, _, fast = path_signal_factors(sensor, point_path(30.0))
        spec = np.abs(np.fft.fft(fast))
        assert int(np.argmax(spec[: len(spec) // 2])) == 200

    def test_doppler_phase_step(self, sensor):
        v = sensor.wavelength / (4 * sensor.chirp_period)
        _, chirp, _ = path_signal_factors(sensor, point_path(10.0, v=v))
        assert np.angle(chirp[1] / chirp[0]) == pytest.approx(math.pi, abs=1e-9) or \
            np.angle(chirp[1] / chirp[0]) == pytest.approx(-math.pi, abs=1e-9)

    def test_antenna_phase_step(self, sensor):
        ang = math.radians(30)
        ant, _, _ = path_signal_factors(sensor, point_path(10.0, ang=ang, amp=2.0))
        assert abs(ant[0]) == pytest.approx(1.0)
        # half-wavelength spacing: pi sin(30 deg)
        assert np.angle(ant[1] / ant[0]) == pytest.approx(math.pi / 2, abs=1e-9)


class TestPaths:
    def mirror_scene(self, obj=(1.0, 0.0), **kw):
        relay = make_wall((5.0, -5.0), (5.0, 5.0), id="relay")
        return Scenario(walls=(relay,), objects=(static_object(*obj, **kw),), num_frames=1)

    def test_mirror_example(self):
        s = self.mirror_scene()
        paths = enumerate_paths(s, 0.0)
        (tb,) = [p for p in paths if p.kind == THIRD_BOUNCE]
        assert np.allclose(tb.virtual_position, (9.0, 0.0))
        assert tb.total_length == pytest.approx(18.0)
        assert tb.radial_velocity == pytest.approx(0.0)
        assert tb.incident_angle == pytest.approx(0.0)
        g = s.sensor.gain
        assert tb.amplitude == pytest.approx(g * s.wall_reflectivity ** 2 * 0.1 / 9 ** 4)
        assert np.allclose(tb.legs[0], (5.0, 0.0))
        (d,) = [p for p in paths if p.kind == DIRECT]
        assert d.total_length == pytest.approx(2.0)

    def test_blocked_direct(self, facade_scene):
        paths = enumerate_paths(facade_scene, 0.0, check_leg_occlusion=False)
        assert [p.kind for p in paths] == [THIRD_BOUNCE]
        # the same leg passes the blocker, so leg checking removes it
        assert enumerate_paths(facade_scene, 0.0) == []

    def test_moving_mirror_velocity(self):
        relay = make_wall((5.0, -5.0), (5.0, 5.0), id="relay")
        obj = HiddenObject("p", "pedestrian", 0.6, 0.6, PolylineTrajectory(((0.0, 1.0, 0.0), (1.0, 2.0, 0.0))),
                           num_scatterers=1)
        s = Scenario(walls=(relay,), objects=(obj,), num_frames=1)
        (tb,) = [p for p in enumerate_paths(s, 0.0) if p.kind == THIRD_BOUNCE]
        # image moves at -1 m/s along x, toward the sensor
        assert tb.radial_velocity == pytest.approx(-1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.5, 4.5), st.floats(-3.0, 3.0))
    def test_reflection_equals_mirror(self, x, y):
        s = self.mirror_scene((x, y))
        for p in enumerate_paths(s, 0.0):
            if p.kind != THIRD_BOUNCE:
                continue
            assert np.allclose(p.virtual_position, (10.0 - x, y), atol=1e-12)
            # unfolded path length equals the straight distance to the image
            assert p.total_length / 2 == pytest.approx(math.hypot(10.0 - x, y), rel=1e-12)
            xw = p.legs[0]
            assert xw[0] == pytest.approx(5.0)
            # equal angles at the specular point
            a = np.array([0.0, 0.0]) - xw
            b = np.array([x, y]) - xw
            assert math.atan2(abs(a[1]), abs(a[0])) == pytest.approx(math.atan2(abs(b[1]), abs(b[0])), abs=1e-9)

    def test_fov_and_range_cut(self):
        s = self.mirror_scene((1.0, 0.0))
        narrow = Scenario(sensor=SensorConfig(fov_azimuth=math.radians(10)), walls=s.walls,
                          objects=(static_object(1.0, 3.0),), num_frames=1)
        assert all(abs(p.incident_angle) <= math.radians(5) for p in enumerate_paths(narrow, 0.0))


class TestSynthesis:
    def test_linear_and_bit_exact(self):
        a, b = point_path(3.0, 0.5, 0.2, 1.0), point_path(7.0, -0.3, -0.4, 0.5)
        both = synthesize_paths(SMALL, [a, b]).samples
        sep = synthesize_paths(SMALL, [a]).samples + synthesize_paths(SMALL, [b]).samples
        assert both.dtype == np.complex64
        assert np.array_equal(both, sep)

    def test_shape(self):
        f = synthesize_paths(SMALL, [point_path(3.0)])
        assert f.samples.shape == (8, 16, 64)

    def test_noise_variance(self):
        rng = np.random.default_rng(0)
        zero = RawFrame(np.zeros((8, 16, 64), np.complex64), 0.0)
        psd = 1e-9
        n = add_noise(zero, SMALL, psd, rng).samples
        assert np.var(n) == pytest.approx(psd * SMALL.sample_rate, rel=0.05)
        assert abs(np.mean(n.real * n.imag)) < 0.05 * np.var(n)
        assert add_noise(zero, SMALL, 0.0, rng) is zero

    def test_frame_deterministic(self, facade_scene):
        s = Scenario(sensor=SMALL, walls=facade_scene.walls, objects=facade_scene.objects, num_frames=2,
                     rng_seed=5, noise_psd=1e-12)
        a = synthesize_frame(s, 1).samples
        b = synthesize_frame(s, 1).samples
        assert np.array_equal(a, b)
        assert not np.array_equal(a, synthesize_frame(s, 0).samples)

    def test_raw_round_trip(self, tmp_path):
        f = synthesize_paths(SMALL, [point_path(3.0)], timestamp=0.3)
        write_raw_frame(tmp_path / "f.raw", f, "abc")
        g, meta = read_raw_frame(tmp_path / "f.raw")
        assert np.array_equal(f.samples, g.samples) and g.timestamp == 0.3 and meta["config"] == "abc"

    def test_raw_truncated(self, tmp_path):
        f = synthesize_paths(SMALL, [point_path(3.0)])
        write_raw_frame(tmp_path / "f.raw", f)
        data = (tmp_path / "f.raw").read_bytes()
        (tmp_path / "f.raw").write_bytes(data[:-8])
        with pytest.raises(ShapeMismatchError):
            read_raw_frame(tmp_path / "f.raw")


def test_lidar_hits_wall():
    s = Scenario(walls=(make_wall((5.0, -5.0), (5.0, 5.0)),), num_frames=1)
    pts = sample_lidar(s, 0.0)
    assert len(pts) > 0
    assert np.allclose(pts[:, 0], 5.0)
    assert np.all(np.abs(pts[:, 1]) <= 5.0 + 1e-9)


def test_mirror_example_moving_across():
    # object at (1, 0) behind a blocker, moving v=(0, 1): the image moves perpendicular to the line of sight
    relay = make_wall((5.0, -5.0), (5.0, 5.0), id="relay")
    block = make_wall((0.5, -0.6), (0.5, 0.6), id="block")
    obj = HiddenObject("p", "pedestrian", 0.6, 0.6, PolylineTrajectory(((0.0, 1.0, 0.0), (1.0, 1.0, 1.0))),
                       rcs=0.1, num_scatterers=1)
    s = Scenario(walls=(relay, block), objects=(obj,), num_frames=1)
    (tb,) = enumerate_paths(s, 0.0, check_leg_occlusion=False)
    assert tb.kind == THIRD_BOUNCE
    assert np.allclose(tb.virtual_position, (9, 0))
    assert tb.radial_velocity == pytest.approx(0.0, abs=1e-12)
    assert tb.total_length == pytest.approx(18.0)
