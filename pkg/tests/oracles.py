"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch
from scipy import stats

from img2mesh.camera import CameraPose
from img2mesh.gsplat import GaussianCloud
from img2mesh.mesh import TriangleMesh, icosphere
from img2mesh.mesh_render import render_mesh
from img2mesh.splat_render import render as render_splats
from img2mesh.texture import TextureField

SPLAT_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


def random_splat_scene(seed: int, max_gaussians: int = 5, resolution: int = 16):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_gaussians + 1))
    t = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
    cloud = GaussianCloud(
        positions=t(rng.uniform(-0.3, 0.3, (n, 3))),
        log_scales=t(np.log(rng.uniform(0.05, 0.2, (n, 3)))),
        rotations=t(rng.normal(size=(n, 4))),
        opacity_logits=t(rng.normal(0.0, 1.0, (n, 1))),
        colors=t(rng.uniform(0.0, 1.0, (n, 3))),
    )
    pose = CameraPose(float(rng.uniform(-180, 180)), float(rng.uniform(-30, 30)), resolution=resolution)
    w_rgb = t(rng.normal(size=(resolution, resolution, 3)))
    w_acc = t(rng.normal(size=(resolution, resolution)))
    return cloud, pose, w_rgb, w_acc


def splat_objective(cloud, pose, w_rgb, w_acc) -> float:
    with torch.no_grad():
        img = render_splats(cloud, pose)
    return float((img.rgb * w_rgb).sum() + (img.accum_opacity * w_acc).sum())


def splat_fd_gradients(cloud, pose, w_rgb, w_acc, step: float = 1e-4) -> dict[str, np.ndarray]:
    """Central finite differences of the weighted image sum for every parameter entry."""
    out = {}
    for name in SPLAT_GROUPS:
        base = getattr(cloud, name)
        g = np.zeros(base.shape)
        for idx in np.ndindex(*base.shape):
            vals = []
            for sign in (1, -1):
                p = {k: v.clone() for k, v in cloud.params().items()}
                p[name][idx] += sign * step
                vals.append(splat_objective(GaussianCloud(**p), pose, w_rgb, w_acc))
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        out[name] = g
    return out


def relative_error(analytic, reference) -> float:
    a, r = np.asarray(analytic, float), np.asarray(reference, float)
    scale = max(np.linalg.norm(r), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - r) / scale)


def mesh_objective(mesh: TriangleMesh, texture, pose: CameraPose, w_rgb, w_mask, eta: float = 1.0) -> float:
    with torch.no_grad():
        img = render_mesh(mesh, texture, pose, eta)
    return float((img.rgb * w_rgb).sum() + (img.mask * w_mask).sum())


def sphere_sdf(points: np.ndarray, radius: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.linalg.norm(points - np.asarray(center), axis=-1) - radius


def brute_force_point_triangle(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
                               samples: int = 0) -> float:
    """Distance from p to triangle abc by projection onto the plane plus edge clamping."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - (p - a) @ n * n
    # barycentric inside test
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11, d20, d21 = v0 @ v0, v0 @ v1, v1 @ v1, v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    if v >= 0 and w >= 0 and v + w <= 1:
        return float(np.linalg.norm(p - q))
    best = np.inf
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip((p - s) @ (e - s) / ((e - s) @ (e - s)), 0, 1)
        best = min(best, float(np.linalg.norm(p - (s + t * (e - s)))))
    return best


def mesh_scene(seed: int = 0, res: int = 64):
    """Jittered icosphere, small random texture, random pose and objective weights."""
    rng = np.random.default_rng(seed)
    mesh = icosphere(3, 0.5)
    mesh.vertices = mesh.vertices + torch.as_tensor(rng.normal(scale=0.01, size=mesh.vertices.shape))
    tex = TextureField(levels=4, log2_table=12, max_res=64, seed=seed)
    with torch.no_grad():
        for enc in (tex.h_ref, tex.h_back):
            enc.tables.normal_(0.0, 0.5, generator=torch.Generator().manual_seed(seed))
    pose = CameraPose(float(rng.uniform(-180, 180)), float(rng.uniform(-20, 20)), resolution=res)
    w_rgb = torch.as_tensor(rng.normal(size=(res, res, 3)))
    w_mask = torch.as_tensor(rng.normal(size=(res, res)))
    return mesh, tex, pose, w_rgb, w_mask


def directional_fd(f, params, direction, h):
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        up = f()
        for p, d in zip(params, direction):
            p.sub_(2 * h * d)
        down = f()
        for p, d in zip(params, direction):
            p.add_(h * d)
    return (up - down) / (2 * h)


def rejection_marginal(n_regions: int, std: float, ref_region: int, weights) -> np.ndarray:
    """Exact region distribution: rejection index probabilities from the truncated
    normal CDF over equal bins, each followed by the renormalized categorical."""
    edges = np.linspace(-1, 1, n_regions + 1)
    cdf = stats.norm.cdf(edges, scale=std)
    p_bin = np.diff(cdf) / (cdf[-1] - cdf[0])
    out = np.zeros(n_regions)
    for k, pk in enumerate(p_bin):
        rejected = (ref_region + k - n_regions // 2) % n_regions
        w = np.array(weights, float)
        w[rejected] = 0
        out += pk * w / w.sum()
    return out
