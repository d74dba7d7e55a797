import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from img2mesh import gsplat
from img2mesh.camera import CameraPose
from img2mesh.compose import ComposeSchedule
from img2mesh.evaluation import builtin_object, render_reference
from img2mesh.mesh import icosphere
from img2mesh.priors import ConstantPrior, OracleBank, OraclePrior
from img2mesh.stages import (
    CoarseConfig, RefineConfig, ReferenceView, StageAbort, bridge, injection_loss, run_coarse, run_refine,
    scale_reg, transmittance_reg,
)


def plain_cloud(n, scales=(0.1, 0.2, 0.3), opacity=0.5):
    pos = torch.zeros(n, 3, dtype=torch.float64)
    rot = torch.zeros(n, 4, dtype=torch.float64)
    rot[:, 0] = 1
    ls = torch.log(torch.tensor(scales, dtype=torch.float64)).expand(n, 3).clone()
    logit = torch.full((n, 1), math.log(opacity / (1 - opacity)), dtype=torch.float64)
    return gsplat.GaussianCloud(pos, ls, rot, logit, torch.full((n, 3), 0.5, dtype=torch.float64))


def shell_cloud(radius=0.5):
    v = icosphere(3, radius).vertices
    n = len(v)
    rot = torch.zeros(n, 4, dtype=torch.float64)
    rot[:, 0] = 1
    return gsplat.GaussianCloud(v.clone(), torch.full((n, 3), math.log(0.04), dtype=torch.float64), rot,
                                torch.full((n, 1), 3.0, dtype=torch.float64),
                                torch.full((n, 3), 0.5, dtype=torch.float64))


@pytest.fixture(scope="module")
def sphere_setup():
    gt = builtin_object("sphere")
    pose = CameraPose(0, 0, resolution=32)
    return gt, OraclePrior(OracleBank(gt)), ReferenceView(render_reference(gt, pose), pose)


class TestTransmittance:
    def image(self, values):
        acc = torch.tensor(values, dtype=torch.float64, requires_grad=True)
        return SimpleNamespace(accum_opacity=acc), acc

    def test_below_tau(self):
        img, _ = self.image([[0.75, 0.75], [0.0, 0.0]])
        term = transmittance_reg(img, plain_cloud(4), 0.9)
        assert term.value.item() == pytest.approx(-0.75) and not term.saturated
        assert term.n_foreground == 2

    def test_saturated_gradient_zero(self):
        img, acc = self.image([[0.95, 0.95], [0.0, 0.0]])
        term = transmittance_reg(img, plain_cloud(4), 0.9)
        assert float(term.value) == -0.9 and term.saturated
        grads = term.gradients([acc], 1.0)
        assert float(grads[0].abs().max()) == 0

    def test_gradient_restricted_to_opaque_gaussians(self):
        cloud = plain_cloud(5).requires_grad_()
        with torch.no_grad():
            cloud.opacity_logits[:, 0] = torch.tensor([2.0, -3.0, 1.0, 0.0, -1.0], dtype=torch.float64)
        from img2mesh.splat_render import render
        with torch.no_grad():
            cloud.positions.copy_(torch.randn(5, 3, generator=torch.Generator().manual_seed(0),
                                              dtype=torch.float64) * 0.1)
        img = render(cloud, CameraPose(0, 0, resolution=16))
        term = transmittance_reg(img, cloud, 0.99, top_opacity_fraction=0.6)
        grads = term.gradients(list(cloud.params().values()), 1.0)
        excluded = torch.tensor([False, True, False, False, True])
        for g in grads:
            assert float(g[excluded].abs().max()) == 0

    def test_no_foreground(self):
        img, _ = self.image([[0.0, 0.0]])
        term = transmittance_reg(img, plain_cloud(1), 0.9)
        assert term.n_foreground == 0 and float(term.value) == 0


class TestScaleReg:
    def test_example(self):
        assert float(scale_reg(plain_cloud(1))) == pytest.approx(0.6, rel=1e-12)

    def test_empty_selection(self):
        assert float(scale_reg(plain_cloud(3), torch.zeros(0, dtype=torch.long))) == 0

    def test_homogeneous(self):
        c = plain_cloud(3)
        d = plain_cloud(3, scales=(0.2, 0.4, 0.6))
        assert float(scale_reg(d)) == pytest.approx(2 * float(scale_reg(c)), rel=1e-12)


def test_injection_loss_gradient():
    x = torch.rand(4, 4, 3, dtype=torch.float64, requires_grad=True)
    g = torch.randn(4, 4, 3, dtype=torch.float64)
    injection_loss(g, x).backward()
    assert torch.equal(x.grad, g)


class TestCoarse:
    def small(self, **kw):
        base = dict(steps=500, num_points=150, res_start=16, res_end=16)
        base.update(kw)
        return CoarseConfig(**base)

    def test_schedules(self):
        cfg = CoarseConfig()
        assert cfg.tau(0) == 0.4 and cfg.tau(500) == 0.9
        assert cfg.topk_ratio(0) == 0.5 and cfg.topk_ratio(500) == pytest.approx(0.1)
        assert [s for s in range(500) if cfg.is_densify_step(s)] == [100, 200, 300, 400]
        assert cfg.resolution(0) == 64 and cfg.resolution(499) == 128
        assert all(cfg.resolution(s) % 16 == 0 for s in range(500))

    def test_densify_steps(self, sphere_setup):
        _, prior, ref = sphere_setup
        out = run_coarse(self.small(), prior, ref, np.random.default_rng(0))
        assert out.densify_steps == [100, 200, 300, 400]
        assert [r["step"] for r in out.records if r.get("densified")] == [100, 200, 300, 400]

    def test_reference_fit_without_prior(self, sphere_setup):
        _, prior, ref = sphere_setup
        cfg = self.small(steps=100, lambda_sds=0.0, lambda_rgb_start=1e4, lambda_mask_start=1e3)
        out = run_coarse(cfg, prior, ref, np.random.default_rng(0))
        mse = np.array([r["l_rgb"] + r["l_mask"] for r in out.records])
        smooth = np.convolve(mse, np.ones(10) / 10, mode="valid")
        assert (np.diff(smooth[::10]) < 0).all()

    def test_deterministic(self, sphere_setup):
        _, prior, ref = sphere_setup
        cfg = self.small(steps=30)
        a = run_coarse(cfg, prior, ref, np.random.default_rng(5))
        b = run_coarse(cfg, prior, ref, np.random.default_rng(5))
        assert a.records == b.records
        for k, v in a.cloud.params().items():
            assert torch.equal(v, b.cloud.params()[k])


class TestRefine:
    def small(self, **kw):
        base = dict(steps=4, batch=1, grid_resolution=16, res_start=32, res_end=32,
                    texture_levels=2, texture_log2_table=10, texture_max_res=32)
        base.update(kw)
        return RefineConfig(**base)

    def test_bridge_on_shell(self):
        grid, base = bridge(shell_cloud(), self.small())
        v = base.numpy()[0]
        assert np.linalg.norm(v, axis=1).min() > 0.35  # the cavity is filled
        assert float(grid.sdf.min()) == -1.0

    def test_bridge_empty_density(self):
        c = shell_cloud()
        c.opacity_logits.fill_(-10.0)
        with pytest.raises(StageAbort):
            bridge(c, self.small())

    def test_s_mode_never_composes(self, sphere_setup):
        _, prior, ref = sphere_setup
        out = run_refine(self.small(), prior, shell_cloud(), ref, np.random.default_rng(0))
        assert out.compose_calls == 0
        assert all(r["compose_calls"] == 0 for r in out.records)
        assert len(out.mesh.faces) > 0 and out.mesh.colors is not None

    def test_l_mode_constant_priors_hit_upper_bound(self, sphere_setup):
        _, _, ref = sphere_setup
        d = torch.randn(32, 32, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        phi = ConstantPrior(d, 1.0)
        rho = ConstantPrior(-d, 1e4)
        cfg = self.small(steps=3, batch=2)
        sched = ComposeSchedule.editing(cfg.steps)
        out = run_refine(cfg, phi, shell_cloud(), ref, np.random.default_rng(0), prior_rho=rho,
                         compose_schedule=sched)
        assert out.compose_calls == cfg.steps * cfg.batch
        for r in out.records:
            for v in r["views"]:
                assert v["clamped"] == "upper"
                assert v["G_out"] == pytest.approx(sched.bounds(v["eta"], r["step"])[0], rel=1e-9)

    def test_second_prior_needs_schedule(self, sphere_setup):
        _, prior, ref = sphere_setup
        with pytest.raises(ValueError):
            run_refine(self.small(), prior, shell_cloud(), ref, np.random.default_rng(0), prior_rho=prior)

    def test_warmup_poses_uniform(self, sphere_setup):
        _, prior, ref = sphere_setup
        out = run_refine(self.small(steps=3), prior, shell_cloud(), ref, np.random.default_rng(0))
        assert all(r["rejected_region"] is None for r in out.records)

    def test_rgb_weight(self):
        assert RefineConfig().rgb_weight == 1500.0
        assert RefineConfig(lambda_sds=2.0).rgb_weight == 3000.0
        assert RefineConfig(lambda_sds=2.0, rgb_times_sds=False).rgb_weight == 1500.0
