import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from img2mesh.camera import CameraPose
from img2mesh.compose import ComposeSchedule, bounds, compose
from img2mesh.priors import ConstantPrior


def norm(x):
    return float(torch.linalg.vector_norm(x.double()))


def cosine(a, b):
    return float((a.double() * b.double()).sum()) / (norm(a) * norm(b))


class TestBounds:
    def test_initial_upper(self):
        assert bounds(ComposeSchedule.editing(1000), 0.5, 0) == (100.0, None)

    def test_front_adjustment(self):
        upper, lower = bounds(ComposeSchedule.editing(1000), 0.8, 0)
        assert upper == pytest.approx(20.0, abs=1e-12) and lower is None

    def test_final_bounds(self):
        assert bounds(ComposeSchedule.editing(1000), 0.2, 1000) == (10.0, 1.0)
        assert bounds(ComposeSchedule.editing(1000), 0.2, 0) == (100.0, 10.0)

    def test_enhancement_endpoints(self):
        s = ComposeSchedule.enhancement(1000)
        assert s.bounds(0.5, 0)[0] == 2.0 and s.bounds(0.5, 1000)[0] == 0.5

    def test_enhancement_lower_never_exceeds_upper(self):
        s = ComposeSchedule.enhancement(1000)
        for it in np.linspace(0, 1000, 21):
            for eta in np.linspace(0, 0.49, 8):
                upper, lower = s.bounds(eta, it)
                assert lower is not None and 0 < lower <= upper

    def test_floor(self):
        upper, _ = bounds(ComposeSchedule.editing(10), 1.0, 10)
        assert upper == 1e-6

    def test_eta_out_of_range(self):
        with pytest.raises(ValueError):
            bounds(ComposeSchedule.editing(10), 1.5, 0)

    def test_discontinuity_at_front_threshold(self):
        s = ComposeSchedule.editing(1000)
        left = s.bounds(0.75, 300)[0]
        right = s.bounds(0.75 + 1e-12, 300)[0]
        base = 100 + (10 - 100) * 0.3
        assert left == pytest.approx(base)
        assert right == pytest.approx(base * 0.25, rel=1e-9)

    @given(st.floats(0, 1), st.floats(0, 999))
    def test_continuous_in_iteration(self, eta, it):
        s = ComposeSchedule.editing(1000)
        a, b = s.bounds(eta, it), s.bounds(eta, it + 1e-6)
        assert a[0] == pytest.approx(b[0], abs=1e-6)
        assert (a[1] is None) == (b[1] is None)

    @given(st.floats(0, 1), st.floats(0, 1000), st.sampled_from(["editing", "enhancement"]))
    def test_ordered_and_positive(self, eta, it, mode):
        s = getattr(ComposeSchedule, mode)(1000)
        upper, lower = s.bounds(eta, it)
        assert upper > 0
        if lower is not None:
            assert 0 < lower <= upper

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            ComposeSchedule(100, "other")
        with pytest.raises(ValueError):
            ComposeSchedule(0)


class TestCompose:
    def test_upper_clamp_example(self):
        s = ComposeSchedule(100, upper_start=2.0, upper_end=2.0)
        phi = torch.tensor([2.0, 0, 0], dtype=torch.float64)
        rho = torch.tensor([0, 6.0, 0], dtype=torch.float64)
        out = compose(phi, rho, 0.5, 0, s)
        assert out.ratio == 3.0 and out.clamped == "upper"
        assert norm(out.grad_rho) == pytest.approx(4.0)
        assert out.composed_ratio == pytest.approx(2.0)
        assert out.grad_phi is phi

    def test_constant_priors_example(self):
        s = ComposeSchedule(100, upper_start=2.0, upper_end=2.0)
        pose = CameraPose(0, 0, resolution=8)
        x = torch.zeros(8, 8, 3, dtype=torch.float64)
        phi = ConstantPrior(torch.randn(8, 8, 3, dtype=torch.float64), 2.0).score(x, pose, 100).grad_image
        rho = ConstantPrior(torch.randn(8, 8, 3, dtype=torch.float64), 6.0).score(x, pose, 100).grad_image
        out = compose(phi, rho, 0.5, 0, s)
        assert norm(out.grad_rho) == pytest.approx(4.0, rel=1e-12)

    def test_lower_clamp_example(self):
        s = ComposeSchedule(100, lower_start=1.0, lower_end=1.0)
        phi = torch.tensor([2.0, 0], dtype=torch.float64)
        rho = torch.tensor([1.0, 0], dtype=torch.float64)
        out = compose(phi, rho, 0.2, 0, s)
        assert out.clamped == "lower"
        assert norm(out.grad_phi) == pytest.approx(1.0)
        assert out.composed_ratio == pytest.approx(1.0)

    def test_inside_window_identity(self):
        s = ComposeSchedule.editing(100)
        phi = torch.randn(4, 4, 3)
        rho = phi * 20
        out = compose(phi, rho, 0.2, 0, s)
        assert out.clamped is None
        assert out.grad_phi is phi and out.grad_rho is rho

    def test_zero_phi_passthrough(self):
        phi, rho = torch.zeros(3), torch.ones(3)
        out = compose(phi, rho, 0.5, 0, ComposeSchedule.editing(10))
        assert out.degenerate and math.isinf(out.ratio)
        assert out.grad_phi is phi and out.grad_rho is rho

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose(torch.ones(3), torch.ones(4), 0.5, 0, ComposeSchedule.editing(10))

    @settings(max_examples=200)
    @given(st.floats(1e-3, 1e3), st.one_of(st.just(0.0), st.floats(1e-6, 1e4)), st.floats(0, 1), st.floats(0, 1000),
           st.sampled_from(["editing", "enhancement"]), st.integers(0, 2**31))
    def test_containment(self, m_phi, m_rho, eta, it, mode, seed):
        g = torch.Generator().manual_seed(seed)
        phi = torch.randn(5, 5, 3, generator=g, dtype=torch.float64)
        rho = torch.randn(5, 5, 3, generator=g, dtype=torch.float64)
        phi, rho = phi * m_phi / norm(phi), rho * m_rho / norm(rho)
        s = getattr(ComposeSchedule, mode)(1000)
        out = compose(phi, rho, eta, it, s)
        upper, lower = s.bounds(eta, it)
        if m_rho == 0 and lower is not None:
            # G = 0 under an active lower bound scales grad_phi by 0: the all-zero case
            assert norm(out.grad_phi) == 0 and norm(out.grad_rho) == 0
            return
        r = out.composed_ratio
        assert r <= upper * (1 + 1e-9)
        if lower is not None:
            assert r >= lower * (1 - 1e-9)
        # at most one side is rescaled, and only by a positive factor
        assert (out.grad_phi is phi) or (out.grad_rho is rho)
        if out.clamped == "upper" and m_rho > 0:
            assert cosine(out.grad_rho, rho) == pytest.approx(1.0, abs=1e-12)
        if out.clamped == "lower":
            assert cosine(out.grad_phi, phi) == pytest.approx(1.0, abs=1e-12)
