"""Metrics and synthetic ground-truth objects for oracle runs."""

from __future__ import annotations

import math

import numpy as np
import torch

from . import mesh as meshlib
from .camera import CameraPose, turntable
from .mesh import TriangleMesh
from .mesh_render import render_mesh
from .splat_render import render as render_splats

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; 99 when MSE < 1e-10."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    return PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def chamfer(mesh_a: TriangleMesh, mesh_b: TriangleMesh, samples: int = 100_000,
            rng: np.random.Generator | int | None = 0) -> float:
    """Symmetric mean of point-to-surface distances between area-weighted surface samples."""
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("chamfer distance needs two non-empty meshes")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    va, fa = mesh_a.numpy()
    vb, fb = mesh_b.numpy()
    pa = meshlib.sample_surface(mesh_a, samples, rng)
    pb = meshlib.sample_surface(mesh_b, samples, rng)
    d_ab = meshlib.closest_points(pa, vb, fb)[0].mean()
    d_ba = meshlib.closest_points(pb, va, fa)[0].mean()
    return float(0.5 * (d_ab + d_ba))


def checker_colors(vertices, cells: float = 4.0) -> torch.Tensor:
    """Two-tone 3D checker pattern sampled at the vertices."""
    v = torch.as_tensor(vertices, dtype=torch.float64)
    parity = torch.floor((v + 1.0) * cells).sum(1).remainder(2)
    light = torch.tensor([0.85, 0.8, 0.3], dtype=torch.float64)
    dark = torch.tensor([0.2, 0.3, 0.7], dtype=torch.float64)
    return torch.where(parity[:, None] > 0, light, dark)


def builtin_object(name: str, texture: str = "vertex") -> TriangleMesh:
    """Ground-truth test objects: ``sphere`` (radius 0.5) or ``torus`` (0.35 / 0.15, axis z)."""
    if name == "sphere":
        m = meshlib.icosphere(4, 0.5)
    elif name == "torus":
        m = meshlib.torus(0.35, 0.15, 96, 48)
    else:
        raise ValueError(f"unknown builtin object {name!r} (expected sphere or torus)")
    if texture == "vertex":
        m.colors = meshlib.smooth_colors(m.vertices)
    elif texture == "checker":
        m.colors = checker_colors(m.vertices)
    else:
        raise ValueError(f"unknown texture mode {texture!r} (expected vertex or checker)")
    return m


def render_reference(gt: TriangleMesh, pose: CameraPose) -> np.ndarray:
    """RGBA rendering of a ground-truth mesh, straight (not premultiplied) alpha."""
    with torch.no_grad():
        img = render_mesh(gt, None, pose)
    alpha = img.mask.double().numpy()
    rgb = img.rgb.double().numpy() / np.maximum(alpha, 1e-12)[..., None]
    rgb = np.where(alpha[..., None] > 0, np.clip(rgb, 0.0, 1.0), 0.0)
    return np.concatenate([rgb, alpha[..., None]], -1)


def held_out_poses(n: int = 8, resolution: int = 64, radius: float = 2.0, fov: float = 49.1) -> list[CameraPose]:
    return turntable(n, radius, fov, resolution)


def view_psnrs_splats(cloud, gt: TriangleMesh, poses) -> list[float]:
    out = []
    with torch.no_grad():
        for pose in poses:
            target = render_mesh(gt, None, pose).rgb
            out.append(psnr(render_splats(cloud, pose).rgb, target))
    return out


def view_psnrs_mesh(mesh: TriangleMesh, texture, gt: TriangleMesh, poses, ref_azimuth: float = 0.0) -> list[float]:
    from .camera import balance_factor

    ref = CameraPose(ref_azimuth, 0.0)
    out = []
    with torch.no_grad():
        for pose in poses:
            target = render_mesh(gt, None, pose).rgb
            pred = render_mesh(mesh, texture, pose, balance_factor(pose, ref)).rgb
            out.append(psnr(pred, target))
    return out
