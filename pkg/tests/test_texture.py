import logging

import numpy as np
import pytest
import torch

from img2mesh.camera import CameraPose, balance_factor
from img2mesh.mesh import icosphere
from img2mesh.mesh_render import render_mesh
from img2mesh.texture import MultiresEncoding, TextureField, shade


def perturb(enc, seed):
    with torch.no_grad():
        enc.tables.add_(torch.randn(enc.tables.shape, generator=torch.Generator().manual_seed(seed),
                                    dtype=enc.tables.dtype))


class TestEncoding:
    def test_dense_level_is_trilinear(self):
        enc = MultiresEncoding(levels=1, features=1, log2_table=12, min_res=4, max_res=4)
        with torch.no_grad():
            n1 = 5
            ax = torch.arange(n1, dtype=torch.float64)
            gx, gy, gz = torch.meshgrid(ax, ax, ax, indexing="ij")
            # a linear function of the vertex coordinates is reproduced exactly
            enc.tables[0, : n1**3, 0] = (gx + 2 * gy - 3 * gz).reshape(-1)
        x = torch.rand(50, 3, dtype=torch.float64) * 2 - 1
        u = (x + 1) / 2 * 4
        expected = u[:, 0] + 2 * u[:, 1] - 3 * u[:, 2]
        torch.testing.assert_close(enc(x)[:, 0], expected, rtol=0, atol=1e-12)

    def test_hashed_levels_in_range_and_continuous(self):
        enc = MultiresEncoding(levels=4, log2_table=10, min_res=8, max_res=64)
        x = torch.rand(200, 3, dtype=torch.float64) * 2 - 1
        a, b = enc(x), enc(x + 1e-9)
        assert a.shape == (200, enc.out_dim)
        assert float((a - b).detach().abs().max()) < 1e-6

    def test_resolutions_geometric(self):
        enc = MultiresEncoding(levels=5, min_res=16, max_res=256)
        assert enc.resolutions[0] == 16 and enc.resolutions[-1] == 256
        assert enc.resolutions == sorted(enc.resolutions)


class TestDisentanglement:
    def test_eta_one_ignores_back(self):
        tex = TextureField(levels=4, log2_table=12, max_res=64)
        x = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
        before = tex.albedo(x, 1.0)
        perturb(tex.h_back, 0)
        assert float((tex.albedo(x, 1.0) - before).abs().max().detach()) == 0

    def test_eta_zero_ignores_ref(self):
        tex = TextureField(levels=4, log2_table=12, max_res=64)
        x = torch.rand(100, 3, dtype=torch.float64) * 2 - 1
        before = tex.albedo(x, 0.0)
        perturb(tex.h_ref, 1)
        assert float((tex.albedo(x, 0.0) - before).abs().max().detach()) == 0

    @pytest.mark.parametrize("eta,which", [(1.0, "h_back"), (0.0, "h_ref")])
    def test_full_render_invariant(self, eta, which):
        tex = TextureField(levels=4, log2_table=12, max_res=64)
        mesh = icosphere(3, 0.5)
        pose = CameraPose(40, 10, resolution=64)
        before = render_mesh(mesh, tex, pose, eta).rgb.detach()
        perturb(getattr(tex, which), 2)
        after = render_mesh(mesh, tex, pose, eta).rgb.detach()
        assert float((after - before).abs().max().detach()) == 0

    def test_balance_factor_endpoints(self):
        ref = CameraPose(0, 0)
        assert balance_factor(CameraPose(0, 0), ref) == 1.0
        assert balance_factor(CameraPose(180, 0), ref) == 0.0
        assert balance_factor(CameraPose(90, 0), ref) == pytest.approx(0.5, abs=1e-15)

    def test_mixed_eta_interpolates_features(self):
        tex = TextureField(levels=2, log2_table=10, max_res=32)
        x = torch.rand(20, 3, dtype=torch.float64) * 2 - 1
        mix = tex.encode(x, 0.25)
        torch.testing.assert_close(mix, 0.75 * tex.h_back(x) + 0.25 * tex.h_ref(x))

    def test_per_point_eta(self):
        tex = TextureField(levels=2, log2_table=10, max_res=32)
        x = torch.rand(4, 3, dtype=torch.float64) * 2 - 1
        eta = torch.tensor([0.0, 1.0, 0.5, 0.2], dtype=torch.float64)
        out = tex.encode(x, eta)
        for i in range(4):
            torch.testing.assert_close(out[i], tex.encode(x[i:i + 1], float(eta[i]))[0])


def test_albedo_range_and_clamp_warning(caplog):
    tex = TextureField(levels=2, log2_table=10, max_res=32)
    with caplog.at_level(logging.WARNING):
        a = tex.albedo(torch.tensor([[1.5, 0, 0], [1.0, 0, 0]], dtype=torch.float64), 0.5)
        tex.albedo(torch.tensor([[2.0, 0, 0]], dtype=torch.float64), 0.5)
    assert caplog.text.count("clamped") == 1
    torch.testing.assert_close(a[0], a[1])
    assert float(a.detach().min()) > 0 and float(a.detach().max()) < 1


def test_shade():
    albedo = torch.full((3, 3), 0.5, dtype=torch.float64)
    n = torch.tensor([[0, 0, 1.0], [0, 0, -1.0], [0, 0.6, 0.8]], dtype=torch.float64)
    light = torch.tensor([0, 0, 1.0], dtype=torch.float64)
    out = shade(albedo, n, light)
    np.testing.assert_allclose(out[:, 0].numpy(), [0.5, 0.1, 0.5 * (0.2 + 0.8 * 0.8)], atol=1e-15)
