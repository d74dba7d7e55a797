"""Differentiable rasterization of Gaussian clouds.

Gaussians are projected with the first-order perspective approximation of
their covariance, sorted by view depth, and alpha-composited front to back
per pixel over a black background. Pixels are processed in square tiles that
only see splats whose 4-sigma footprint touches them (the kernel is shifted
down by its value at 4 sigma so the footprint edge is continuous); a pixel stops once its
residual transmittance would drop below 1e-4.

The projection runs in torch autograd; compositing is a compiled kernel with
an explicit reverse-order backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import _splat_kernels as kern
from .camera import CameraPose, view_transform
from .gsplat import GaussianCloud, covariance

DILATION = 0.3
TRANSMITTANCE_EPS = 1e-4
NEAR = 0.05
FOOTPRINT_SIGMAS = 4.0
TILE = 16


@dataclass
class SplatImage:
    rgb: torch.Tensor            # (H, W, 3)
    accum_opacity: torch.Tensor  # (H, W)
    means2d: torch.Tensor        # (N, 2) projected centers, kept in the graph
    visible: np.ndarray          # (N,) bool, listed in at least one tile
    n_contrib: np.ndarray        # (H, W) splats visited per pixel before termination
    tile_ids: np.ndarray
    tile_ranges: np.ndarray
    conic: torch.Tensor
    opacity: torch.Tensor

    def contributors(self, row: int, col: int, tile: int = TILE) -> list[tuple[int, float]]:
        """(gaussian index, blend weight) pairs compositing pixel (row, col), front to back."""
        res = self.accum_opacity.shape[0]
        t = (row // tile) * ((res + tile - 1) // tile) + col // tile
        start = self.tile_ranges[t, 0]
        means = self.means2d.detach().double().numpy()
        conic = self.conic.detach().double().numpy()
        opacity = self.opacity.detach().double().numpy()
        out, trans = [], 1.0
        for k in range(start, start + self.n_contrib[row, col]):
            i = int(self.tile_ids[k])
            dx, dy = col + 0.5 - means[i, 0], row + 0.5 - means[i, 1]
            power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
            if power > 0 or power < kern.MAX_POWER:
                continue
            alpha = opacity[i] * (np.exp(power) - kern.FLOOR)
            out.append((i, alpha * trans))
            trans *= 1 - alpha
        return out


@dataclass
class SplatGradients:
    positions: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    view_grad_norm: torch.Tensor  # (N,) norm of dL/d(projected center)


def project(cloud: GaussianCloud, pose: CameraPose):
    """Screen-space centers, 2D covariances (dilated) and view depths of every Gaussian."""
    dtype = cloud.positions.dtype
    vt = torch.as_tensor(view_transform(pose), dtype=dtype)
    rot, trans = vt[:3, :3], vt[:3, 3]
    pc = cloud.positions @ rot.T + trans
    depth = -pc[:, 2]
    safe = torch.where(depth > NEAR, depth, torch.full_like(depth, NEAR))
    f, c = pose.focal, pose.resolution / 2
    means2d = torch.stack([f * pc[:, 0] / safe + c, -f * pc[:, 1] / safe + c], -1)
    zero = torch.zeros_like(safe)
    jac = torch.stack(
        [
            torch.stack([f / safe, zero, f * pc[:, 0] / safe**2], -1),
            torch.stack([zero, -f / safe, -f * pc[:, 1] / safe**2], -1),
        ],
        1,
    )
    m = jac @ rot
    cov2 = m @ covariance(cloud.log_scales, cloud.rotations) @ m.transpose(1, 2)
    cov2 = cov2 + DILATION * torch.eye(2, dtype=dtype)
    return means2d, cov2, depth


class _Composite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conic, opacity, colors, lists, res, tile):
        ids, ranges = lists
        arrays = [t.detach().double().numpy() for t in (means2d, conic, opacity, colors)]
        rgb, t_final, n_used = kern.composite_forward(res, tile, ranges, ids, *arrays, TRANSMITTANCE_EPS)
        ctx.save_for_backward(means2d, conic, opacity, colors)
        ctx.meta = (ids, ranges, res, tile, n_used)
        dtype = means2d.dtype
        return torch.as_tensor(rgb, dtype=dtype), torch.as_tensor(1.0 - t_final, dtype=dtype), n_used

    @staticmethod
    def backward(ctx, grad_rgb, grad_acc, _):
        ids, ranges, res, tile, n_used = ctx.meta
        arrays = [t.detach().double().numpy() for t in ctx.saved_tensors]
        grads = kern.composite_backward(
            res, tile, ranges, ids, *arrays, n_used,
            grad_rgb.double().numpy(), grad_acc.double().numpy(),
        )
        dtype = ctx.saved_tensors[0].dtype
        return (*(torch.as_tensor(g, dtype=dtype) for g in grads), None, None, None)


def render(cloud: GaussianCloud, pose: CameraPose, tile: int = TILE) -> SplatImage:
    res = pose.resolution
    dtype = cloud.positions.dtype
    n = len(cloud)
    means2d, cov2, depth = project(cloud, pose)
    a, b, d = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * d - b * b
    conic = torch.stack([d / det, -b / det, a / det], -1)
    opacity = cloud.opacities[:, 0]

    with torch.no_grad():
        lam = 0.5 * (a + d) + torch.sqrt((0.25 * (a - d) ** 2 + b * b).clamp_min(0))
        radius = (FOOTPRINT_SIGMAS * torch.sqrt(lam)).double().numpy()
        depth_np = depth.detach().double().numpy()
        front = depth_np > NEAR
        order = np.argsort(np.where(front, depth_np, np.inf), kind="stable")[: int(front.sum())]
        ids, ranges, _ = kern.build_tile_lists(means2d.detach().double().numpy(), radius, order, res, tile)

    visible = np.zeros(n, bool)
    visible[ids] = True
    rgb, acc, n_used = _Composite.apply(means2d, conic, opacity, cloud.colors, (ids, ranges), res, tile)
    return SplatImage(rgb, acc, means2d, visible, n_used, ids, ranges, conic, opacity)


def backward(cloud: GaussianCloud, pose: CameraPose, grad_rgb, grad_opacity) -> SplatGradients:
    """Vector-Jacobian product of the render w.r.t. every Gaussian parameter."""
    res = pose.resolution
    dtype = cloud.positions.dtype
    grad_rgb = torch.as_tensor(grad_rgb, dtype=dtype)
    grad_opacity = torch.as_tensor(grad_opacity, dtype=dtype)
    if tuple(grad_rgb.shape) != (res, res, 3) or tuple(grad_opacity.shape) != (res, res):
        raise ValueError(
            f"gradient images {tuple(grad_rgb.shape)}/{tuple(grad_opacity.shape)} do not match a {res}x{res} render"
        )
    leaf = cloud.detach().requires_grad_()
    params = list(leaf.params().values())
    if len(leaf) == 0:
        return SplatGradients(*(torch.zeros_like(p) for p in params), torch.zeros(0, dtype=dtype))
    with torch.enable_grad():
        img = render(leaf, pose)
        grads = torch.autograd.grad(
            [img.rgb, img.accum_opacity], params + [img.means2d],
            grad_outputs=[grad_rgb, grad_opacity], allow_unused=True,
        )
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params + [img.means2d], grads)]
    return SplatGradients(*grads[:5], grads[5].norm(dim=1))
