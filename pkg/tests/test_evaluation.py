import math

import numpy as np
import pytest
import torch

from img2mesh.evaluation import PSNR_CAP, builtin_object, chamfer, psnr
from img2mesh.mesh import icosphere


class TestPsnr:
    def test_identical(self):
        x = torch.rand(4, 4, 3)
        assert psnr(x, x) == PSNR_CAP

    def test_constant_offset(self):
        a = torch.zeros(8, 8, 3, dtype=torch.float64)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
        assert psnr(a, a + 0.01) == pytest.approx(40.0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(2, 2, 3), torch.zeros(3, 3, 3))


class TestChamfer:
    def test_identity(self):
        m = icosphere(2, 0.5)
        assert chamfer(m, m, 5000) < 1e-12

    def test_offset_monotone(self):
        m = icosphere(2, 0.5)
        vals = [chamfer(m, m.transformed(1.0, [d, 0, 0]), 5000) for d in (0.05, 0.1, 0.2)]
        assert vals[0] < vals[1] < vals[2]

    def test_concentric_spheres(self):
        # for nested spheres every point is ~|r1 - r2| from the other surface
        a, b = icosphere(4, 0.5), icosphere(4, 0.6)
        assert chamfer(a, b, 20_000) == pytest.approx(0.1, abs=2e-3)

    def test_symmetric(self):
        a, b = icosphere(2, 0.5), builtin_object("torus")
        assert chamfer(a, b, 5000, rng=1) == pytest.approx(chamfer(b, a, 5000, rng=1), rel=0.05)

    def test_empty(self):
        from img2mesh.mesh import TriangleMesh
        with pytest.raises(ValueError):
            chamfer(TriangleMesh.empty(), icosphere(1))


def test_builtin_objects():
    s, t = builtin_object("sphere"), builtin_object("torus", "checker")
    assert s.colors is not None and t.colors is not None
    assert float(t.colors.min()) >= 0 and float(t.colors.max()) <= 1
    assert t.volume() == pytest.approx(2 * math.pi**2 * 0.35 * 0.15**2, rel=1e-2)
    with pytest.raises(ValueError):
        builtin_object("cube")
    with pytest.raises(ValueError):
        builtin_object("sphere", "marble")
