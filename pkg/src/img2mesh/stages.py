"""The two optimization loops.

Coarse: a Gaussian cloud is fitted with the prior's image gradient at random
views plus photometric and mask losses at the reference view, transmittance
and scale regularization, and periodic Top-K densification with pruning.

Refine: the cloud's density field is meshed, converted to a scaled SDF on a
deformable grid, and grid plus texture field are optimized through the mesh
renderer, optionally composing two priors by angle.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import gsplat, splat_render, surface
from .camera import CameraPose, PoseRanges, PoseSampler, balance_factor, sample_uniform
from .compose import ComposeSchedule, compose
from .mesh import TriangleMesh
from .mesh_render import render_mesh
from .priors import ScorePrior, TimestepScheduler
from .texture import TextureField

log = logging.getLogger(__name__)

FOREGROUND_ALPHA = 0.01


class StageAbort(RuntimeError):
    """Optimization stopped on a non-finite value or degenerate geometry."""

    def __init__(self, message: str, checkpoint: str | None = None):
        super().__init__(message if checkpoint is None else f"{message} (diagnostic checkpoint: {checkpoint})")
        self.checkpoint = checkpoint


def _lerp(a: float, b: float, step: int, total: int) -> float:
    return a + (b - a) * step / max(total, 1)


def _snap_resolution(lo: int, hi: int, step: int, total: int, multiple: int = 16) -> int:
    res = _lerp(lo, hi, step, total - 1)  # the last step renders at ``hi``
    return int(max(lo, min(hi, multiple * math.floor(res / multiple + 1e-9)))) if hi != lo else lo


@dataclass
class CoarseConfig:
    steps: int = 500
    densify_period: int = 100
    topk_start: float = 0.5
    topk_end: float = 0.1
    prune_opacity: float = 0.1
    split_threshold: float = 0.03
    lambda_sds: float = 1000.0   # calibrated to the oracle's 2/(H*W) gradient scale
    lambda_scale: float = 0.01
    lambda_tr: float = 1.0
    lambda_rgb_start: float = 0.0
    lambda_rgb_end: float = 10000.0
    lambda_mask_start: float = 0.0
    lambda_mask_end: float = 1000.0
    tau_start: float = 0.4
    tau_end: float = 0.9
    top_opacity_fraction: float = 0.8
    res_start: int = 64
    res_end: int = 128
    radius: float = 2.0
    fov: float = 49.1
    num_points: int = 2000
    init_radius: float = 0.5
    init_opacity: float = 0.1
    lr_position: float = 1e-3
    lr_position_final: float = 2e-5
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2

    def lambda_rgb(self, step: int) -> float:
        return _lerp(self.lambda_rgb_start, self.lambda_rgb_end, step, self.steps)

    def lambda_mask(self, step: int) -> float:
        return _lerp(self.lambda_mask_start, self.lambda_mask_end, step, self.steps)

    def tau(self, step: int) -> float:
        return _lerp(self.tau_start, self.tau_end, step, self.steps)

    def topk_ratio(self, step: int) -> float:
        return _lerp(self.topk_start, self.topk_end, step, self.steps)

    def resolution(self, step: int) -> int:
        return _snap_resolution(self.res_start, self.res_end, step, self.steps)

    def position_lr(self, step: int) -> float:
        frac = min(step / max(self.steps, 1), 1.0)
        return self.lr_position * (self.lr_position_final / self.lr_position) ** frac

    def is_densify_step(self, step: int) -> bool:
        return step > 0 and step % self.densify_period == 0

    def transmittance_active(self, step: int) -> bool:
        return step >= self.densify_period


@dataclass
class RefineConfig:
    steps: int = 1000
    batch: int = 4
    grid_resolution: int = 48
    lambda_rgb: float = 1500.0
    lambda_mask: float = 5000.0
    lambda_sdf: float = 1.0
    lambda_sds: float = 1.0
    lambda_consistency: float = 0.1
    rgb_times_sds: bool = True   # weight the reference rgb term by lambda_rgb * lambda_sds
    lr_sdf: float = 1e-3
    lr_deform: float = 5e-3
    lr_interp: float = 5e-3
    lr_texture: float = 1e-2
    res_start: int = 64
    res_end: int = 128
    radius: float = 2.0
    fov: float = 49.1
    density_iso: float = 0.2
    density_min_scale_cells: float = 0.5
    fill_cavities: bool = True
    fit_extent: float = 0.9
    xi_start: float = 1.0
    xi_end: float = 3.0
    sdf_margin_cells: float = 2.0
    texture_levels: int = 8
    texture_log2_table: int = 16
    texture_min_res: int = 16
    texture_max_res: int = 256
    texture_hidden: int = 32

    def resolution(self, step: int) -> int:
        return _snap_resolution(self.res_start, self.res_end, step, self.steps)

    @property
    def rgb_weight(self) -> float:
        return self.lambda_rgb * (self.lambda_sds if self.rgb_times_sds else 1.0)


# reference view -------------------------------------------------------------------

class ReferenceView:
    """RGBA reference image and its camera; targets are premultiplied onto black."""

    def __init__(self, rgba: np.ndarray, pose: CameraPose):
        rgba = np.asarray(rgba, np.float64)
        if rgba.ndim != 3 or rgba.shape[2] != 4:
            raise ValueError("reference image must be H x W x 4 (RGBA)")
        self.rgba = rgba
        self.pose = pose
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def pose_at(self, res: int) -> CameraPose:
        return self.pose.with_resolution(res)

    def targets(self, res: int) -> tuple[torch.Tensor, torch.Tensor]:
        if res not in self._cache:
            img = torch.as_tensor(self.rgba)
            premult = torch.cat([img[..., :3] * img[..., 3:], img[..., 3:]], -1)
            if premult.shape[0] != res or premult.shape[1] != res:
                x = premult.permute(2, 0, 1)[None]
                x = F.interpolate(x, size=(res, res), mode="bilinear", antialias=True, align_corners=False)
                premult = x[0].permute(1, 2, 0).clamp(0.0, 1.0)
            self._cache[res] = (premult[..., :3].contiguous(), premult[..., 3].contiguous())
        return self._cache[res]


# loss terms ----------------------------------------------------------------------------

@dataclass
class TransmittanceTerm:
    value: torch.Tensor          # -min(tau, mean accumulated opacity over foreground)
    mean: float
    n_foreground: int
    saturated: bool
    gaussian_mask: torch.Tensor  # (N,) True where the term may push gradient

    def gradients(self, params: list[torch.Tensor], weight: float) -> list[torch.Tensor]:
        """Gradients of ``weight * value`` with rows of masked-out Gaussians zeroed."""
        if not self.value.requires_grad:
            return [torch.zeros_like(p) for p in params]
        grads = torch.autograd.grad(weight * self.value, params, retain_graph=True, allow_unused=True)
        out = []
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            out.append(g * self.gaussian_mask.to(g.dtype).reshape(-1, *([1] * (g.ndim - 1))))
        return out


def top_opacity_mask(cloud: gsplat.GaussianCloud, fraction: float) -> torch.Tensor:
    alpha = cloud.opacities.detach()[:, 0].double().numpy()
    keep = gsplat.select_topk(alpha, fraction)
    mask = torch.zeros(len(cloud), dtype=torch.bool)
    mask[torch.as_tensor(keep, dtype=torch.long)] = True
    return mask


def transmittance_reg(image: splat_render.SplatImage, cloud: gsplat.GaussianCloud, tau: float,
                      top_opacity_fraction: float = 0.8) -> TransmittanceTerm:
    """``-min(tau, mean T_k)`` over foreground pixels (accumulated opacity > 0.01).

    Only the most opaque ``top_opacity_fraction`` of Gaussians may receive its
    gradient (see :meth:`TransmittanceTerm.gradients`); once the mean reaches
    ``tau`` the term is constant and its gradient is exactly zero.
    """
    acc = image.accum_opacity
    mask = top_opacity_mask(cloud, top_opacity_fraction)
    fg = acc.detach() > FOREGROUND_ALPHA
    n_fg = int(fg.sum())
    if n_fg == 0:
        return TransmittanceTerm(acc.new_zeros(()), 0.0, 0, False, mask)
    mean = acc[fg].mean()
    if mean.item() >= tau:
        return TransmittanceTerm(acc.new_tensor(-tau), mean.item(), n_fg, True, mask)
    return TransmittanceTerm(-mean, mean.item(), n_fg, False, mask)


def scale_reg(cloud: gsplat.GaussianCloud, index=None) -> torch.Tensor:
    """Sum over Gaussians of the L1 norm of their scales."""
    s = cloud.scales if index is None else cloud.scales[index]
    return s.abs().sum()


def injection_loss(grad_image: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Surrogate whose gradient w.r.t. ``rendered`` is exactly ``grad_image``."""
    return (grad_image.detach().to(rendered.dtype) * rendered).sum()


# metrics ------------------------------------------------------------------------------------

class MetricsLog:
    """Line-delimited JSON records, kept in memory and optionally appended to a file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _finite(x: float) -> float:
    return float(x) if math.isfinite(float(x)) else float("nan")


def _check_finite(tensors, what: str, on_abort) -> None:
    for name, t in tensors:
        if t is not None and not bool(torch.isfinite(t).all()):
            path = on_abort() if on_abort is not None else None
            raise StageAbort(f"non-finite {what} in {name!r}", path)


# coarse ------------------------------------------------------------------------------------

@dataclass
class CoarseResult:
    cloud: gsplat.GaussianCloud
    records: list[dict]
    densify_steps: list[int] = field(default_factory=list)


def _coarse_optimizer(cloud: gsplat.GaussianCloud, cfg: CoarseConfig, step: int) -> torch.optim.Adam:
    groups = [
        {"params": [cloud.positions], "lr": cfg.position_lr(step), "name": "positions"},
        {"params": [cloud.log_scales], "lr": cfg.lr_scale, "name": "log_scales"},
        {"params": [cloud.rotations], "lr": cfg.lr_rotation, "name": "rotations"},
        {"params": [cloud.opacity_logits], "lr": cfg.lr_opacity, "name": "opacity_logits"},
        {"params": [cloud.colors], "lr": cfg.lr_color, "name": "colors"},
    ]
    return torch.optim.Adam(groups, betas=(0.9, 0.99), eps=1e-8)


def run_coarse(cfg: CoarseConfig, prior: ScorePrior, reference: ReferenceView, rng: np.random.Generator,
               metrics: MetricsLog | None = None, checkpoint_dir: str | Path | None = None,
               cloud: gsplat.GaussianCloud | None = None, poses: PoseRanges | None = None) -> CoarseResult:
    metrics = metrics if metrics is not None else MetricsLog()
    ranges = poses or PoseRanges(radius=cfg.radius, fov=cfg.fov)
    if cloud is None:
        cloud = gsplat.init_cloud(cfg.num_points, rng, cfg.init_radius, cfg.init_opacity)
    cloud = cloud.detach().requires_grad_()
    sched = TimestepScheduler(cfg.steps)
    stats = gsplat.DensifyStats(len(cloud))
    opt = _coarse_optimizer(cloud, cfg, 0)
    densified = []

    def dump():
        if checkpoint_dir is None:
            return None
        path = Path(checkpoint_dir) / "coarse_abort.gscl"
        path.parent.mkdir(parents=True, exist_ok=True)
        gsplat.save_cloud(cloud, path)
        return str(path)

    for step in range(cfg.steps):
        res = cfg.resolution(step)
        for group in opt.param_groups:
            if group["name"] == "positions":
                group["lr"] = cfg.position_lr(step)
        opt.zero_grad(set_to_none=True)

        pose = sample_uniform(ranges, rng, res)
        t = sched.sample(step, rng)
        view = splat_render.render(cloud, pose)
        view.means2d.retain_grad()
        feedback = prior.score(view.rgb, pose, t)

        ref_pose = reference.pose_at(res)
        target_rgb, target_alpha = reference.targets(res)
        ref = splat_render.render(cloud, ref_pose)
        ref.means2d.retain_grad()
        l_rgb = F.mse_loss(ref.rgb, target_rgb.to(ref.rgb.dtype))
        l_mask = F.mse_loss(ref.accum_opacity, target_alpha.to(ref.rgb.dtype))
        l_scale = scale_reg(cloud)
        total = (cfg.lambda_sds * injection_loss(feedback.grad_image, view.rgb)
                 + cfg.lambda_rgb(step) * l_rgb + cfg.lambda_mask(step) * l_mask
                 + cfg.lambda_scale * l_scale)

        params = list(cloud.params().values())
        tr = None
        if cfg.transmittance_active(step):
            tr = transmittance_reg(view, cloud, cfg.tau(step), cfg.top_opacity_fraction)
            tr_grads = tr.gradients(params, cfg.lambda_tr)
        total.backward()
        if tr is not None:
            for p, g in zip(params, tr_grads):
                p.grad = g if p.grad is None else p.grad + g
        _check_finite([(n, p.grad) for n, p in cloud.params().items()], "gradient", dump)

        with torch.no_grad():
            for img in (view, ref):
                g = img.means2d.grad
                if g is not None:
                    stats.accumulate(g.norm(dim=1).double().numpy(), img.visible,
                                     cloud.positions.grad.double().numpy())
        opt.step()
        cloud.normalize_()
        _check_finite(cloud.params().items(), "parameter", dump)

        record = {
            "stage": "coarse", "step": step, "t": t, "res": res,
            "azimuth": pose.azimuth, "elevation": pose.elevation,
            "prior_error": _finite(feedback.error), "prior_magnitude": _finite(feedback.magnitude),
            "l_rgb": l_rgb.item(), "l_mask": l_mask.item(), "l_scale": l_scale.item(),
            "l_tr": tr.value.item() if tr is not None else 0.0,
            "tr_mean": tr.mean if tr is not None else None,
            "tr_saturated": tr.saturated if tr is not None else None,
            "n_gaussians": len(cloud),
        }

        if cfg.is_densify_step(step):
            ratio = cfg.topk_ratio(step)
            grown = gsplat.densify_topk(cloud, stats, ratio, cfg.split_threshold, rng)
            cloud = gsplat.prune(grown, cfg.prune_opacity).requires_grad_()
            stats.reset(len(cloud))
            opt = _coarse_optimizer(cloud, cfg, step)
            densified.append(step)
            record.update(densified=True, topk_ratio=ratio, n_after=len(cloud))
        metrics.write(record)

    return CoarseResult(cloud.detach(), metrics.records, densified)


# refine ----------------------------------------------------------------------------------------

@dataclass
class RefineResult:
    grid: surface.DeformableGrid
    texture: TextureField
    mesh: TriangleMesh                 # final extraction, vertex colors baked
    records: list[dict]
    compose_calls: int = 0
    coarse_mesh: TriangleMesh | None = None


def bridge(cloud: gsplat.GaussianCloud, cfg: RefineConfig) -> tuple[surface.DeformableGrid, TriangleMesh]:
    """Density field -> base mesh -> recentered -> signed distance on the grid (normalized to min -1)."""
    cell = 2.0 / cfg.grid_resolution
    density = gsplat.density_grid(cloud, cfg.grid_resolution, min_scale=cfg.density_min_scale_cells * cell)
    base = surface.mesh_from_density(density, cfg.density_iso, fill_cavities=cfg.fill_cavities)
    if base.is_empty:
        raise StageAbort(
            "degenerate coarse geometry: the density field has no surface at the iso level; "
            "inspect the coarse-stage metrics and renders"
        )
    base, _, _ = surface.recenter(base, cfg.fit_extent)
    grid = surface.DeformableGrid(cfg.grid_resolution)
    surface.init_sdf_from_mesh(grid, base)
    try:
        surface.scale_sdf(grid, 1.0)
    except surface.GeometryError as exc:
        raise StageAbort(str(exc)) from exc
    return grid, base


def vertex_eta(vertices: torch.Tensor, ref_azimuth: float) -> torch.Tensor:
    """Balance factor per vertex from the azimuth of its direction around the vertical axis."""
    az = torch.atan2(vertices[:, 0], vertices[:, 2])
    return 0.5 * (torch.cos(az - math.radians(ref_azimuth)) + 1.0)


def bake_colors(mesh: TriangleMesh, texture: TextureField, ref_azimuth: float) -> TriangleMesh:
    with torch.no_grad():
        v = mesh.vertices.detach()
        colors = texture.albedo(v, vertex_eta(v, ref_azimuth)) if len(v) else v.new_zeros((0, 3))
    return TriangleMesh(v, mesh.faces, colors)


def run_refine(cfg: RefineConfig, prior_phi: ScorePrior, cloud: gsplat.GaussianCloud, reference: ReferenceView,
               rng: np.random.Generator, prior_rho: ScorePrior | None = None,
               compose_schedule: ComposeSchedule | None = None, metrics: MetricsLog | None = None,
               checkpoint_dir: str | Path | None = None, seed: int = 0) -> RefineResult:
    if (prior_rho is None) != (compose_schedule is None):
        raise ValueError("a second prior needs a compose schedule and vice versa")
    metrics = metrics if metrics is not None else MetricsLog()
    grid, base = bridge(cloud, cfg)
    grid.requires_grad_()
    texture = TextureField(cfg.texture_levels, 2, cfg.texture_log2_table, cfg.texture_min_res,
                           cfg.texture_max_res, cfg.texture_hidden, seed=seed)
    opt = torch.optim.Adam(
        [
            {"params": [grid.sdf], "lr": cfg.lr_sdf},
            {"params": [grid.deform], "lr": cfg.lr_deform},
            {"params": [grid.interp_weights, grid.split_weights], "lr": cfg.lr_interp},
            {"params": list(texture.parameters()), "lr": cfg.lr_texture},
        ],
        betas=(0.9, 0.99), eps=1e-8,
    )
    ranges = PoseRanges(radius=cfg.radius, fov=cfg.fov)
    sampler = PoseSampler(ranges, ref_azimuth=reference.pose.azimuth)
    sched = TimestepScheduler(cfg.steps)
    compose_calls = 0

    def dump():
        if checkpoint_dir is None:
            return None
        path = Path(checkpoint_dir) / "refine_abort.grid"
        path.parent.mkdir(parents=True, exist_ok=True)
        surface.save_grid(path, grid, texture)
        return str(path)

    for step in range(cfg.steps):
        res = cfg.resolution(step)
        grid.xi = surface.xi_schedule(step, cfg.steps, cfg.xi_start, cfg.xi_end)
        opt.zero_grad(set_to_none=True)
        mesh = surface.extract_mesh_differentiable(grid)
        if mesh.is_empty:
            raise StageAbort("refinement surface vanished (empty extraction)", dump())

        sds = 0.0
        views = []
        for _ in range(cfg.batch):
            pose = sampler.sample(rng, step, res)
            eta = balance_factor(pose, reference.pose)
            t = sched.sample(step, rng)
            img = render_mesh(mesh, texture, pose, eta)
            fb_phi = prior_phi.score(img.rgb, pose, prior_phi.timestep_transform(t, eta))
            grad = fb_phi.grad_image
            view = {"azimuth": pose.azimuth, "elevation": pose.elevation, "eta": eta, "t": t,
                    "error": _finite(fb_phi.error)}
            if prior_rho is not None:
                fb_rho = prior_rho.score(img.rgb, pose, prior_rho.timestep_transform(t, eta))
                comp = compose(fb_phi.grad_image, fb_rho.grad_image, eta, step, compose_schedule)
                compose_calls += 1
                grad = comp.grad_phi + comp.grad_rho
                view.update(G=_finite(comp.ratio) if not comp.degenerate else None,
                            G_out=comp.composed_ratio if not comp.degenerate else None,
                            upper=comp.upper, lower=comp.lower, clamped=comp.clamped,
                            degenerate=comp.degenerate)
            sds = sds + injection_loss(grad, img.rgb) / cfg.batch
            sampler.record_error(pose.azimuth, fb_phi.error)
            views.append(view)

        ref_pose = reference.pose_at(res)
        target_rgb, target_alpha = reference.targets(res)
        ref = render_mesh(mesh, texture, ref_pose, 1.0)
        l_rgb = F.mse_loss(ref.rgb, target_rgb.to(ref.rgb.dtype))
        l_mask = F.mse_loss(ref.mask, target_alpha.to(ref.mask.dtype))
        l_sdf = surface.sdf_regularizer(grid, cfg.sdf_margin_cells)
        l_cons = surface.normal_consistency(mesh)
        total = (cfg.lambda_sds * sds + cfg.lambda_sdf * l_sdf + cfg.lambda_consistency * l_cons
                 + cfg.rgb_weight * l_rgb + cfg.lambda_mask * l_mask)
        total.backward()
        _check_finite([("sdf", grid.sdf.grad), ("deform", grid.deform.grad)]
                      + [(n, p.grad) for n, p in texture.named_parameters()], "gradient", dump)
        opt.step()
        grid.clamp_deform_()
        _check_finite([("sdf", grid.sdf), ("deform", grid.deform)], "parameter", dump)

        metrics.write({
            "stage": "refine", "step": step, "res": res, "xi": grid.xi,
            "l_rgb": l_rgb.item(), "l_mask": l_mask.item(), "l_sdf": l_sdf.item(),
            "l_consistency": l_cons.item(), "n_faces": len(mesh.faces),
            "rejected_region": sampler.last_rejection, "compose_calls": compose_calls,
            "views": views,
        })

    with torch.no_grad():
        final = surface.extract_mesh_differentiable(grid).detach()
    final = bake_colors(final, texture, reference.pose.azimuth)
    grid.requires_grad_(False)
    return RefineResult(grid, texture, final, metrics.records, compose_calls, base)


def config_dict(cfg) -> dict:
    return asdict(cfg)
