"""Differentiable software rasterizer for textured triangle meshes.

Visibility (which face covers which pixel center) comes from a compiled
z-buffer pass and is treated as constant. Everything downstream of it is
torch autograd: perspective-correct barycentrics, the surface point fed to
the texture field, flat Lambertian shading under a headlight, and a
silhouette coverage band. For every pair of horizontally or vertically
adjacent pixels where one is covered and the other is background, the
front-most silhouette edge crossing the segment between their centers shifts
coverage from one pixel to the other in proportion to where it crosses. That
band is the only path for silhouette gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np
import torch

from .camera import CameraPose, view_transform
from .mesh import TriangleMesh, edge_face_adjacency
from .texture import shade

NEAR = 0.05
DEFAULT_ALBEDO = 0.8


@dataclass
class MeshImage:
    rgb: torch.Tensor        # (H, W, 3)
    mask: torch.Tensor       # (H, W)
    face_id: np.ndarray      # (H, W) int, -1 for background
    bary: torch.Tensor       # (P, 3) perspective-correct weights of the covered pixels
    depth: np.ndarray        # (H, W) view depth, inf for background

    @property
    def hit(self) -> np.ndarray:
        return self.face_id >= 0


def project_vertices(vertices: torch.Tensor, pose: CameraPose):
    """Image-plane coordinates (V, 2) as (col, row) and view depth (V,)."""
    vt = torch.as_tensor(view_transform(pose), dtype=vertices.dtype)
    pc = vertices @ vt[:3, :3].T + vt[:3, 3]
    depth = -pc[:, 2]
    safe = torch.where(depth > NEAR, depth, torch.full_like(depth, NEAR))
    f, c = pose.focal, pose.resolution / 2
    return torch.stack([f * pc[:, 0] / safe + c, -f * pc[:, 1] / safe + c], -1), depth


@nb.njit(cache=True)
def _rasterize(screen, depth, faces, res):
    zbuf = np.full((res, res), np.inf)
    fid = np.full((res, res), -1, np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if depth[i0] <= 0.05 or depth[i1] <= 0.05 or depth[i2] <= 0.05:
            continue
        x0, y0 = screen[i0, 0], screen[i0, 1]
        x1, y1 = screen[i1, 0], screen[i1, 1]
        x2, y2 = screen[i2, 0], screen[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        c0 = max(int(np.ceil(min(x0, x1, x2) - 0.5)), 0)
        c1 = min(int(np.floor(max(x0, x1, x2) - 0.5)), res - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2) - 0.5)), 0)
        r1 = min(int(np.floor(max(y0, y1, y2) - 0.5)), res - 1)
        for r in range(r0, r1 + 1):
            py = r + 0.5
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = 1.0 / (w0 / depth[i0] + w1 / depth[i1] + w2 / depth[i2])
                if z < zbuf[r, c] or (z == zbuf[r, c] and f < fid[r, c]):
                    zbuf[r, c] = z
                    fid[r, c] = f
    return fid, zbuf


@nb.njit(cache=True)
def _silhouette_pairs(fid, screen, depth, sil_edges):
    """For each covered/background neighbour pair, the front-most silhouette edge
    crossing the segment between the two pixel centers.

    Returns rows of (in_row, in_col, out_row, out_col, edge index).
    """
    res = fid.shape[0]
    out = np.empty((4 * res * res, 5), np.int64)
    n = 0
    for r in range(res):
        for c in range(res):
            if fid[r, c] < 0:
                continue
            for k in range(4):
                rr, cc = r, c
                if k == 0:
                    cc = c + 1
                elif k == 1:
                    cc = c - 1
                elif k == 2:
                    rr = r + 1
                else:
                    rr = r - 1
                if rr < 0 or rr >= res or cc < 0 or cc >= res or fid[rr, cc] >= 0:
                    continue
                ax, ay = c + 0.5, r + 0.5
                bx, by = cc + 0.5, rr + 0.5
                best, best_z = -1, np.inf
                for e in range(sil_edges.shape[0]):
                    i, j = sil_edges[e, 0], sil_edges[e, 1]
                    if depth[i] <= 0.05 or depth[j] <= 0.05:
                        continue
                    px, py = screen[i, 0], screen[i, 1]
                    qx, qy = screen[j, 0], screen[j, 1]
                    # solve a + s (b - a) = p + u (q - p)
                    dx, dy = bx - ax, by - ay
                    ex, ey = qx - px, qy - py
                    den = dx * ey - dy * ex
                    if den == 0.0:
                        continue
                    s = ((px - ax) * ey - (py - ay) * ex) / den
                    u = ((px - ax) * dy - (py - ay) * dx) / den
                    if s < 0.0 or s > 1.0 or u < 0.0 or u > 1.0:
                        continue
                    z = 1.0 / ((1.0 - u) / depth[i] + u / depth[j])
                    if z < best_z:
                        best, best_z = e, z
                if best >= 0:
                    out[n, 0], out[n, 1], out[n, 2], out[n, 3], out[n, 4] = r, c, rr, cc, best
                    n += 1
    return out[:n]


def silhouette_edges(faces: np.ndarray, screen: np.ndarray, adjacency=None) -> np.ndarray:
    """Boundary edges and edges between a front-facing and a back-facing face."""
    edges, adj = adjacency if adjacency is not None else edge_face_adjacency(faces)
    if len(edges) == 0:
        return edges
    tri = screen[faces]
    area = (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1]) - \
           (tri[:, 2, 0] - tri[:, 0, 0]) * (tri[:, 1, 1] - tri[:, 0, 1])
    # image rows grow downwards, so counter-clockwise in the world is clockwise here
    front = area < 0
    boundary = adj[:, 1] < 0
    flip = ~boundary & (front[adj[:, 0]] != front[np.maximum(adj[:, 1], 0)])
    return edges[boundary | flip]


def render_mesh(mesh: TriangleMesh, texture, pose: CameraPose, eta: float = 1.0,
                antialias: bool = True) -> MeshImage:
    """Render ``mesh`` with albedo from ``texture`` (or its vertex colors when None)."""
    res = pose.resolution
    dtype = mesh.vertices.dtype
    if mesh.is_empty:
        zero = torch.zeros((res, res), dtype=dtype)
        return MeshImage(torch.zeros((res, res, 3), dtype=dtype), zero,
                         np.full((res, res), -1, np.int64), torch.zeros((0, 3), dtype=dtype),
                         np.full((res, res), np.inf))
    screen, depth = project_vertices(mesh.vertices, pose)
    faces = mesh.faces.numpy()
    screen_np = screen.detach().double().numpy()
    depth_np = depth.detach().double().numpy()
    fid, zbuf = _rasterize(screen_np, depth_np, faces, res)
    rows, cols = np.nonzero(fid >= 0)
    hit_faces = torch.as_tensor(fid[rows, cols])

    # perspective-correct barycentrics at pixel centers
    idx = mesh.faces[hit_faces]                                 # (P, 3)
    s = screen[idx]                                             # (P, 3, 2)
    pix = torch.stack([torch.as_tensor(cols + 0.5), torch.as_tensor(rows + 0.5)], -1).to(dtype)
    def edge(a, b):
        return (s[:, a, 0] - pix[:, 0]) * (s[:, b, 1] - pix[:, 1]) - (s[:, b, 0] - pix[:, 0]) * (s[:, a, 1] - pix[:, 1])
    area = edge(0, 1) + edge(1, 2) + edge(2, 0)
    screen_bary = torch.stack([edge(1, 2), edge(2, 0), edge(0, 1)], -1) / area[:, None]
    w = screen_bary / depth[idx]
    bary = w / w.sum(-1, keepdim=True)

    if texture is None:
        colors = mesh.colors if mesh.colors is not None else torch.full_like(mesh.vertices, DEFAULT_ALBEDO)
        albedo = (bary[:, :, None] * colors[idx]).sum(1)
    else:
        points = (bary[:, :, None] * mesh.vertices[idx]).sum(1)
        albedo = texture.albedo(points, eta)
    normal = mesh.face_normals()[hit_faces]
    light = torch.as_tensor(pose.view_dir, dtype=dtype)
    color = shade(albedo, normal, light)

    flat = torch.as_tensor(rows * res + cols)
    rgb = torch.zeros((res * res, 3), dtype=dtype).index_put((flat,), color)
    mask = torch.zeros(res * res, dtype=dtype).index_put((flat,), torch.ones(len(flat), dtype=dtype))

    if antialias and len(flat):
        sil = silhouette_edges(faces, screen_np, mesh.adjacency())
        pairs = _silhouette_pairs(fid, screen_np, depth_np, sil) if len(sil) else np.zeros((0, 5), np.int64)
        if len(pairs):
            rgb, mask = _blend_band(rgb, mask, color, fid, pairs, sil, screen, res)
    return MeshImage(rgb.reshape(res, res, 3), mask.reshape(res, res), fid, bary, zbuf)


def _blend_band(rgb, mask, color, fid, pairs, sil, screen, res):
    """Move coverage across covered/background boundaries in proportion to where
    the silhouette edge crosses the segment between the two pixel centers."""
    dtype = rgb.dtype
    lookup = np.full(res * res, -1, np.int64)
    hit_flat = np.flatnonzero(fid.reshape(-1) >= 0)
    lookup[hit_flat] = np.arange(len(hit_flat))
    in_flat = pairs[:, 0] * res + pairs[:, 1]
    out_flat = pairs[:, 2] * res + pairs[:, 3]
    e = torch.as_tensor(sil[pairs[:, 4]])
    p, q = screen[e[:, 0]], screen[e[:, 1]]
    horizontal = torch.as_tensor(pairs[:, 0] == pairs[:, 2])
    # coordinate along the pair axis where the edge meets the pixel row / column
    a = torch.as_tensor(np.where(pairs[:, 0] == pairs[:, 2], pairs[:, 1], pairs[:, 0]) + 0.5, dtype=dtype)
    b = torch.as_tensor(np.where(pairs[:, 0] == pairs[:, 2], pairs[:, 3], pairs[:, 2]) + 0.5, dtype=dtype)
    fixed = torch.as_tensor(np.where(pairs[:, 0] == pairs[:, 2], pairs[:, 0], pairs[:, 1]) + 0.5, dtype=dtype)
    along = torch.where(horizontal, torch.tensor(0), torch.tensor(1))
    across = 1 - along
    p_al, q_al = p.gather(1, along[:, None])[:, 0], q.gather(1, along[:, None])[:, 0]
    p_ac, q_ac = p.gather(1, across[:, None])[:, 0], q.gather(1, across[:, None])[:, 0]
    t = (fixed - p_ac) / (q_ac - p_ac)
    cross = p_al + t * (q_al - p_al)
    s = ((cross - a) / (b - a)).clamp(0.0, 1.0)
    c_in = color[torch.as_tensor(lookup[in_flat])]
    gain = (s - 0.5).clamp_min(0.0)     # edge inside the background pixel: it gains coverage
    loss = (0.5 - s).clamp_min(0.0)     # edge inside the covered pixel: it loses coverage
    idx_out, idx_in = torch.as_tensor(out_flat), torch.as_tensor(in_flat)
    mask = mask.index_add(0, idx_out, gain).index_add(0, idx_in, -loss)
    rgb = rgb.index_add(0, idx_out, gain[:, None] * c_in).index_add(0, idx_in, -loss[:, None] * c_in)
    return rgb.clamp_min(0.0), mask.clamp(0.0, 1.0)


def backward_mesh(image: MeshImage, grad_rgb, grad_mask, wrt) -> list[torch.Tensor]:
    """Vector-Jacobian product of a rendered image w.r.t. the tensors in ``wrt``
    (vertex positions, texture parameters); unused inputs get zero gradients."""
    res = image.rgb.shape[0]
    grad_rgb = torch.as_tensor(grad_rgb, dtype=image.rgb.dtype)
    grad_mask = torch.as_tensor(grad_mask, dtype=image.mask.dtype)
    if tuple(grad_rgb.shape) != tuple(image.rgb.shape) or tuple(grad_mask.shape) != tuple(image.mask.shape):
        raise ValueError(
            f"gradient images {tuple(grad_rgb.shape)}/{tuple(grad_mask.shape)} do not match the {res}x{res} render"
        )
    wrt = list(wrt)
    outputs = [o for o in (image.rgb, image.mask) if o.requires_grad]
    if not outputs:
        return [torch.zeros_like(w) for w in wrt]
    grads_out = [g for o, g in zip((image.rgb, image.mask), (grad_rgb, grad_mask)) if o.requires_grad]
    grads = torch.autograd.grad(outputs, wrt, grads_out, retain_graph=True, allow_unused=True)
    return [torch.zeros_like(w) if g is None else g for w, g in zip(wrt, grads)]
