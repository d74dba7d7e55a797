"""Anisotropic 3D Gaussian clouds: storage, covariances, Top-K densification, pruning, density queries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .binio import read_arrays, write_arrays

log = logging.getLogger(__name__)

SPLIT_SCALE_DIVISOR = 1.6
MIN_SCALE = 1e-6
_MAGIC, _VERSION = b"GSCL", 1


@dataclass
class GaussianCloud:
    positions: torch.Tensor       # (N, 3)
    log_scales: torch.Tensor      # (N, 3)
    rotations: torch.Tensor       # (N, 4) quaternions, w first
    opacity_logits: torch.Tensor  # (N, 1)
    colors: torch.Tensor          # (N, 3) rgb in [0, 1]

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def params(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn) -> "GaussianCloud":
        return GaussianCloud(**{k: fn(v) for k, v in self.params().items()})

    def detach(self) -> "GaussianCloud":
        return self.map(lambda t: t.detach().clone())

    def requires_grad_(self) -> "GaussianCloud":
        for t in self.params().values():
            t.requires_grad_(True)
        return self

    def subset(self, index) -> "GaussianCloud":
        return self.map(lambda t: t.detach()[index].clone())

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return self.map(lambda t: t.detach().to(dtype))

    @torch.no_grad()
    def normalize_(self) -> "GaussianCloud":
        """Re-project parameters onto their valid sets after an optimizer step."""
        self.rotations /= self.rotations.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        self.colors.clamp_(0.0, 1.0)
        self.log_scales.clamp_(min=math.log(MIN_SCALE))
        return self

    @staticmethod
    def cat(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        names = [f.name for f in fields(GaussianCloud)]
        return GaussianCloud(**{n: torch.cat([getattr(c, n).detach() for c in clouds]) for n in names})


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) quaternions (w, x, y, z), normalized internally -> (..., 3, 3)."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, -1).reshape(*q.shape[:-1], 3, 3)


def covariance(log_scale: torch.Tensor, quat: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for batched log-scales (..., 3) and quaternions (..., 4)."""
    rs = quat_to_rotmat(quat) * torch.exp(log_scale)[..., None, :]
    return rs @ rs.transpose(-1, -2)


def init_cloud(
    count: int,
    rng: np.random.Generator,
    sphere_radius: float = 0.5,
    opacity: float = 0.1,
    color: float = 0.5,
    dtype: torch.dtype = torch.float32,
) -> GaussianCloud:
    """Uniform points in a ball, grey, semi-transparent, isotropic scales from neighbor spacing."""
    if count < 1:
        raise ValueError("count must be at least 1")
    direction = rng.normal(size=(count, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    pos = direction * sphere_radius * rng.uniform(size=(count, 1)) ** (1 / 3)
    if count > 1:
        k = min(4, count)
        dist, _ = cKDTree(pos).query(pos, k=k)
        spacing = dist[:, 1:].mean(axis=1)
    else:
        spacing = np.full(1, sphere_radius / 2)
    spacing = np.maximum(spacing, 1e-4)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    rot = np.zeros((count, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=t(pos),
        log_scales=t(np.repeat(np.log(spacing)[:, None], 3, axis=1)),
        rotations=t(rot),
        opacity_logits=t(np.full((count, 1), math.log(opacity / (1 - opacity)))),
        colors=t(np.full((count, 3), color)),
    )


class DensifyStats:
    """Running view-space positional gradient statistics per Gaussian."""

    def __init__(self, n: int):
        self.reset(n)

    def reset(self, n: int) -> None:
        self.grad_norm = np.zeros(n)
        self.count = np.zeros(n)
        self.world_grad = np.zeros((n, 3))

    def __len__(self) -> int:
        return len(self.grad_norm)

    def accumulate(self, view_grad_norm, visible, world_grad=None) -> None:
        visible = np.asarray(visible, dtype=bool)
        self.grad_norm[visible] += np.asarray(view_grad_norm)[visible]
        self.count[visible] += 1
        if world_grad is not None:
            self.world_grad[visible] += np.asarray(world_grad)[visible]

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_norm / np.maximum(self.count, 1), 0.0)


def select_topk(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of the ``ceil(ratio * N)`` largest scores; ties go to the lower index."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    k = math.ceil(ratio * len(scores) - 1e-9)
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:k])


@torch.no_grad()
def densify_topk(
    cloud: GaussianCloud,
    stats: DensifyStats,
    ratio: float,
    scale_split_threshold: float,
    rng: np.random.Generator,
) -> GaussianCloud:
    """Clone small / split large Gaussians among the Top-K by mean view-space gradient.

    Clones are appended, offset half a scale along the descent direction of the
    accumulated world-space positional gradient. A split replaces the parent by
    one child and appends the other; children are drawn from the parent's
    Gaussian with scales divided by 1.6. ``stats`` is reset to the new size.
    """
    if len(stats) != len(cloud):
        raise ValueError("stats are not aligned with the cloud")
    chosen = select_topk(stats.mean(), ratio)
    if len(chosen) == 0:
        stats.reset(len(cloud))
        return cloud.detach()
    base = cloud.detach()
    max_scale = base.scales.max(dim=1).values.numpy()
    split = chosen[max_scale[chosen] >= scale_split_threshold]
    clone = chosen[max_scale[chosen] < scale_split_threshold]

    clones = base.subset(torch.as_tensor(clone, dtype=torch.long))
    if len(clone):
        g = stats.world_grad[clone]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norm > 0, -g / np.maximum(norm, 1e-30), 0.0)
        offset = 0.5 * max_scale[clone, None] * direction
        clones.positions += torch.as_tensor(offset, dtype=clones.positions.dtype)

    split_t = torch.as_tensor(split, dtype=torch.long)
    children = base.subset(split_t)
    if len(split):
        cov = covariance(children.log_scales.double(), children.rotations.double()).numpy()
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
        draws = [np.einsum("nij,nj->ni", chol, rng.normal(size=(len(split), 3))) for _ in range(2)]
        children.log_scales -= math.log(SPLIT_SCALE_DIVISOR)
        base.log_scales[split_t] -= math.log(SPLIT_SCALE_DIVISOR)
        children.positions += torch.as_tensor(draws[1], dtype=children.positions.dtype)
        base.positions[split_t] += torch.as_tensor(draws[0], dtype=base.positions.dtype)

    out = GaussianCloud.cat([base, clones, children])
    stats.reset(len(out))
    return out


@torch.no_grad()
def prune(cloud: GaussianCloud, opacity_threshold: float = 0.1) -> GaussianCloud:
    """Drop Gaussians with opacity below the threshold, always keeping at least one."""
    alpha = cloud.opacities.detach()[:, 0]
    keep = alpha >= opacity_threshold
    if not bool(keep.any()):
        log.warning(
            "all %d Gaussians fall below opacity %.3g; keeping the most opaque one",
            len(cloud), opacity_threshold,
        )
        keep = torch.zeros_like(keep)
        keep[int(torch.argmax(alpha))] = True
    return cloud.subset(keep)


def _inverse_covariances(cloud: GaussianCloud, log_floor: float = math.log(MIN_SCALE)) -> np.ndarray:
    log_s = np.maximum(cloud.log_scales.detach().double().numpy(), log_floor)
    rot = quat_to_rotmat(cloud.rotations.detach().double()).numpy()
    inv_s2 = np.exp(-2 * log_s)
    return np.einsum("nij,nj,nkj->nik", rot, inv_s2, rot)


def density_at(cloud: GaussianCloud, points, exact: bool = False, chunk: int = 4096) -> np.ndarray:
    """Sum of ``alpha_i * exp(-d^T Sigma_i^-1 d / 2)`` at query points (P, 3) -> (P,).

    Unless ``exact``, Gaussians farther than 3 standard deviations (Mahalanobis)
    contribute nothing.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    mu = cloud.positions.detach().double().numpy()
    alpha = cloud.opacities.detach().double().numpy()[:, 0]
    inv = _inverse_covariances(cloud)
    out = np.zeros(len(pts))
    for lo in range(0, len(pts), chunk):
        d = pts[lo : lo + chunk, None, :] - mu[None]
        m2 = np.einsum("pni,nij,pnj->pn", d, inv, d)
        w = alpha * np.exp(-0.5 * m2)
        if not exact:
            w = np.where(m2 <= 9.0, w, 0.0)
        out[lo : lo + chunk] = w.sum(axis=1)
    return out


def density_grid(cloud: GaussianCloud, resolution: int, bound: float = 1.0, min_scale: float = 0.0) -> np.ndarray:
    """Cutoff density sampled on the (resolution+1)^3 vertices of [-bound, bound]^3, indexed [x, y, z].

    ``min_scale`` widens Gaussians thinner than that (keeping their peak
    opacity) so sub-cell splats are not missed by the grid samples.
    """
    n = resolution + 1
    axis = np.linspace(-bound, bound, n)
    h = axis[1] - axis[0]
    field = np.zeros((n, n, n))
    mu = cloud.positions.detach().double().numpy()
    alpha = cloud.opacities.detach().double().numpy()[:, 0]
    floor = math.log(max(MIN_SCALE, min_scale))
    inv = _inverse_covariances(cloud, floor)
    log_s = np.maximum(cloud.log_scales.detach().double().numpy(), floor)
    radius = 3.0 * np.exp(log_s).max(axis=1)
    lo = np.clip(np.ceil((mu - radius[:, None] + bound) / h - 1e-9), 0, n - 1).astype(int)
    hi = np.clip(np.floor((mu + radius[:, None] + bound) / h + 1e-9), 0, n - 1).astype(int)
    for i in range(len(mu)):
        if np.any(hi[i] < lo[i]):
            continue
        sl = tuple(slice(lo[i, a], hi[i, a] + 1) for a in range(3))
        g = np.stack(np.meshgrid(*(axis[s] for s in sl), indexing="ij"), -1) - mu[i]
        m2 = np.einsum("...i,ij,...j->...", g, inv[i], g)
        field[sl] += np.where(m2 <= 9.0, alpha[i] * np.exp(-0.5 * m2), 0.0)
    return field


def save_cloud(cloud: GaussianCloud, path: str | Path) -> None:
    write_arrays(path, _MAGIC, _VERSION, {k: v.detach().numpy() for k, v in cloud.params().items()})


def load_cloud(path: str | Path, dtype: torch.dtype = torch.float32) -> GaussianCloud:
    arrays = read_arrays(path, _MAGIC, _VERSION)
    return GaussianCloud(**{k: torch.as_tensor(v, dtype=dtype) for k, v in arrays.items()})
