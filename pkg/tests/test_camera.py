import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from img2mesh.camera import (
    CameraPose, PoseRanges, PoseSampler, balance_factor, relative_pose, sample_uniform, turntable,
    view_transform, wrap_degrees,
)

from oracles import rejection_marginal


class TestViewTransform:
    @pytest.mark.parametrize("az,el,expected", [
        (0, 0, (0, 0, 2)), (90, 0, (2, 0, 0)), (0, 90, (0, 2, 0)),
    ])
    def test_positions(self, az, el, expected):
        pose = CameraPose(az, el, 2.0)
        np.testing.assert_allclose(pose.position, expected, atol=1e-12)
        m = view_transform(pose)
        # the camera center maps to the camera-space origin
        np.testing.assert_allclose(m[:3, :3] @ pose.position + m[:3, 3], 0, atol=1e-12)

    def test_looks_at_origin(self):
        pose = CameraPose(0, 0, 2.0)
        origin_cam = view_transform(pose) @ np.array([0, 0, 0, 1.0])
        np.testing.assert_allclose(origin_cam[:3], [0, 0, -2], atol=1e-12)

    @given(st.floats(-180, 180), st.floats(-89, 89), st.floats(0.5, 5))
    def test_rigid(self, az, el, r):
        m = view_transform(CameraPose(az, el, r))
        rot = m[:3, :3]
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
        # world up projects onto non-negative camera up for |elevation| < 90
        assert rot[1] @ np.array([0, 1, 0]) > 0

    def test_invalid_pose(self):
        with pytest.raises(ValueError):
            CameraPose(0, 0, radius=0)
        with pytest.raises(ValueError):
            CameraPose(0, 0, fov=180)


class TestBalanceFactor:
    @pytest.mark.parametrize("delta,eta", [(0, 1.0), (180, 0.0), (90, 0.5), (-90, 0.5)])
    def test_endpoints(self, delta, eta):
        assert balance_factor(CameraPose(delta, 0), CameraPose(0, 0)) == pytest.approx(eta, abs=1e-15)

    @given(st.floats(-720, 720), st.floats(-180, 180))
    def test_symmetric_periodic(self, d, ref):
        r = CameraPose(0, 0)
        f = lambda a: balance_factor(CameraPose(a, 0), r)
        assert 0.0 <= f(d) <= 1.0
        assert f(d) == pytest.approx(f(-d), abs=1e-12)
        assert f(d) == pytest.approx(f(d + 360.0), abs=1e-12)

    def test_decreasing_on_half_turn(self):
        r = CameraPose(0, 0)
        vals = [balance_factor(CameraPose(a, 0), r) for a in np.linspace(0, 180, 361)]
        assert all(b < a for a, b in zip(vals, vals[1:]))


class TestRelativePose:
    def test_identity(self):
        p = CameraPose(33, 12, 2.5)
        rp = relative_pose(p, p)
        assert (rp.delta_azimuth, rp.delta_elevation, rp.delta_radius) == (0, 0, 0)

    def test_wrapped(self):
        assert relative_pose(CameraPose(-170, 0), CameraPose(170, 0)).delta_azimuth == pytest.approx(20)
        assert relative_pose(CameraPose(170, 0), CameraPose(-170, 0)).delta_azimuth == pytest.approx(-20)
        assert relative_pose(CameraPose(0, 0, 2), CameraPose(0, 0, 2)).delta_radius == 0

    @given(st.floats(-1000, 1000))
    def test_wrap_range(self, a):
        w = wrap_degrees(a)
        assert -180 <= w < 180
        assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(a)), abs_tol=1e-9)


class TestSampleUniform:
    def test_degenerate_range(self):
        rng = np.random.default_rng(0)
        ranges = PoseRanges((0, 0), (0, 0), radius=2)
        for _ in range(10):
            p = sample_uniform(ranges, rng)
            assert (p.azimuth, p.elevation, p.radius) == (0, 0, 2)

    def test_mean_and_containment(self):
        rng = np.random.default_rng(1)
        poses = [sample_uniform(PoseRanges(), rng) for _ in range(10_000)]
        az = np.array([p.azimuth for p in poses])
        el = np.array([p.elevation for p in poses])
        # sigma of uniform(-180, 180) is 360 / sqrt(12) ~ 103.9
        assert abs(az.mean()) < 3 * 104 / math.sqrt(10_000)
        assert el.min() >= -45 and el.max() <= 45
        assert az.min() >= -180 and az.max() <= 180

    def test_ranges_must_be_ordered(self):
        with pytest.raises(ValueError):
            PoseRanges((10, -10))


class TestTurntable:
    def test_eight_even_views(self):
        poses = turntable(8)
        az = sorted(p.azimuth for p in poses)
        assert len(poses) == 8 and all(p.elevation == 0 for p in poses)
        np.testing.assert_allclose(np.diff(az), 45.0)
        assert az[0] >= -180 and az[-1] <= 180


class TestPoseSampler:
    def test_record_error_fifo(self):
        s = PoseSampler(capacity=4)
        s.record_error(-170, 1.0)
        assert list(s.queues[0]) == [1.0]
        s = PoseSampler(capacity=4)
        for e in [1, 2, 3, 4, 5]:
            s.record_error(-170, e)
        assert list(s.queues[0]) == [2, 3, 4, 5]

    def test_region_partition(self):
        s = PoseSampler(n_regions=5)
        assert s.region_of(179) == 4
        assert s.region_of(-180) == 0
        assert s.region_of(180) == 4
        for a in np.linspace(-180, 180, 3601):
            r = s.region_of(a)
            lo = -180 + 72 * r
            assert lo <= a <= lo + 72 + 1e-9

    def test_non_finite_error_rejected(self):
        with pytest.raises(ValueError):
            PoseSampler().record_error(0, float("nan"))

    def test_warmup_is_uniform(self):
        a, b = np.random.default_rng(3), np.random.default_rng(3)
        s = PoseSampler()
        for it in range(100):
            p = s.sample(a, it)
            q = sample_uniform(s.ranges, b)
            assert (p.azimuth, p.elevation) == (q.azimuth, q.elevation)

    def test_center_maps_to_reference_region(self):
        s = PoseSampler(ref_azimuth=0.0)
        assert s.rejection_index(0.0) == s.region_of(0.0)
        s = PoseSampler(ref_azimuth=150.0)
        assert s.rejection_index(0.0) == s.region_of(150.0)

    def test_never_in_rejected_region(self):
        rng = np.random.default_rng(5)
        s = PoseSampler()
        for k in range(5):
            for _ in range(3):
                s.record_error(-180 + 72 * k + 1, k + 1.0)
        for it in range(2000):
            p = s.sample(rng, 100 + it)
            assert s.region_of(p.azimuth) != s.last_rejection
            assert -45 <= p.elevation <= 45

    def test_chi_square_equal_queues(self):
        rng = np.random.default_rng(11)
        s = PoseSampler()
        for k in range(5):
            s.record_error(-180 + 72 * k + 1, 1.0)
        counts = np.zeros(5)
        for _ in range(100_000):
            counts[s.region_of(s.sample(rng, 200).azimuth)] += 1
        expected = rejection_marginal(5, 0.5, s.region_of(0.0), np.ones(5)) * 100_000
        assert stats.chisquare(counts, expected).pvalue > 0.01

    def test_deterministic(self):
        def draws(seed):
            rng, s = np.random.default_rng(seed), PoseSampler()
            s.record_error(10, 2.0)
            return [(p.azimuth, p.elevation) for p in (s.sample(rng, 150) for _ in range(50))]
        assert draws(4) == draws(4)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.01, 10), min_size=5, max_size=5))
    def test_weights_follow_queue_means(self, errs):
        s = PoseSampler()
        for k, e in enumerate(errs):
            s.record_error(-180 + 72 * k + 1, e)
        np.testing.assert_allclose(s.region_weights(), errs)

    def test_empty_queues_fall_back_to_uniform(self):
        s = PoseSampler()
        np.testing.assert_allclose(s.region_weights(), np.ones(5))
