"""Refinement geometry: isosurface extraction, SDF initialization and scaling,
the deformable grid and the geometric regularizers.

Grids are sampled on the (n+1)^3 vertices of ``[-bound, bound]^3`` and indexed
``[x, y, z]``. The SDF convention is negative inside; a cube corner counts as
inside when its value is strictly below the iso level.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numba as nb
import numpy as np
from scipy import ndimage
import torch
import torch.nn.functional as F

from . import _mc_tables
from .binio import CheckpointError, read_arrays, write_arrays
from .mesh import TriangleMesh, closest_points, edge_face_adjacency

log = logging.getLogger(__name__)

_MAGIC = b"DGRD"
_VERSION = 1


class GeometryError(RuntimeError):
    pass


def _padded_table() -> np.ndarray:
    table = np.full((256, 16), -1, np.int64)
    for case, tris in enumerate(_mc_tables.TRI_TABLE):
        table[case, : len(tris)] = tris
    return table


_TRI = _padded_table()
_CORNERS = np.array(_mc_tables.CORNER_OFFSETS, np.int64)
# per edge: offset of its lower corner and the axis it runs along
_EDGE_BASE = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in _mc_tables.EDGE_CORNERS])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[b] - _CORNERS[a]))) for a, b in _mc_tables.EDGE_CORNERS])


def grid_axis(resolution: int, bound: float = 1.0) -> np.ndarray:
    return np.linspace(-bound, bound, resolution + 1)


def grid_points(resolution: int, bound: float = 1.0) -> np.ndarray:
    """(n+1, n+1, n+1, 3) vertex coordinates."""
    ax = grid_axis(resolution, bound)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)


def _extract(sdf: torch.Tensor, pos: torch.Tensor, iso: float) -> TriangleMesh:
    """Marching cubes on vertex values ``sdf`` at vertex positions ``pos``.

    Topology comes from the detached values; vertex positions stay in the
    autograd graph of ``sdf`` and ``pos``.
    """
    n1 = sdf.shape[0]
    n = n1 - 1
    s = sdf.detach().double().numpy()
    inside = (s < iso).astype(np.int64)
    case = np.zeros((n, n, n), np.int64)
    for c, (dx, dy, dz) in enumerate(_CORNERS):
        case |= inside[dx : dx + n, dy : dy + n, dz : dz + n] << c
    active = np.nonzero((case != 0) & (case != 255))
    if len(active[0]) == 0:
        return TriangleMesh(pos.reshape(-1, 3)[:0], torch.zeros((0, 3), dtype=torch.int64))
    cells = np.stack(active, 1)
    edges = _TRI[case[active]]                       # (A, 16), -1 padded
    valid = edges >= 0
    which = np.nonzero(valid)
    e = edges[which]
    base = cells[which[0]] + _EDGE_BASE[e]
    strides = np.array([n1 * n1, n1, 1])
    keys = (base @ strides) * 3 + _EDGE_AXIS[e]
    uniq, inv = np.unique(keys, return_inverse=True)
    faces = inv.reshape(-1, 3)

    va = uniq // 3
    vb = va + strides[uniq % 3]
    flat_s = sdf.reshape(-1)
    flat_p = pos.reshape(-1, 3)
    sa, sb = flat_s[va], flat_s[vb]
    t = ((iso - sa) / (sb - sa)).unsqueeze(1)
    verts = flat_p[va] + t * (flat_p[vb] - flat_p[va])

    v_np = verts.detach().double().numpy()
    a, b, c = v_np[faces[:, 0]], v_np[faces[:, 1]], v_np[faces[:, 2]]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    keep = area2 > 1e-14 * float(np.abs(v_np).max() + 1.0) ** 2
    faces = faces[keep]
    used, remap = np.unique(faces, return_inverse=True)
    faces = remap.reshape(-1, 3)
    verts = verts[torch.as_tensor(used)]
    # the table winds triangles clockwise seen from outside; flip to outward normals
    faces = faces[:, [0, 2, 1]]
    return TriangleMesh(verts, torch.as_tensor(faces, dtype=torch.int64))


def marching_cubes(field, iso: float = 0.0, bound: float = 1.0) -> TriangleMesh:
    """Isosurface of a vertex-sampled (n+1)^3 grid spanning ``[-bound, bound]^3``.

    Values below ``iso`` are inside. A field with no crossing returns an empty
    mesh (check ``mesh.is_empty``).
    """
    field = torch.as_tensor(np.asarray(field, np.float64))
    if field.ndim != 3 or len(set(field.shape)) != 1 or field.shape[0] < 2:
        raise ValueError(f"expected a cubic vertex grid with at least 2 samples per axis, got {tuple(field.shape)}")
    pos = torch.as_tensor(grid_points(field.shape[0] - 1, bound))
    with torch.no_grad():
        return _extract(field, pos, iso)


class DeformableGrid:
    """SDF + per-vertex deformation on a regular grid over ``[-bound, bound]^3``.

    ``sdf`` is stored normalized (min -1 after initialization) and multiplied
    by the gain ``xi`` at extraction. ``interp_weights`` and ``split_weights``
    are kept for a dual extractor; the marching-cubes extractor ignores them.
    """

    def __init__(self, resolution: int = 80, bound: float = 1.0, dtype: torch.dtype = torch.float64):
        if resolution < 1:
            raise ValueError("resolution must be at least 1")
        n1 = resolution + 1
        self.resolution = resolution
        self.bound = bound
        self.sdf = torch.zeros((n1, n1, n1), dtype=dtype)
        self.deform = torch.zeros((n1, n1, n1, 3), dtype=dtype)
        self.interp_weights = torch.ones((resolution**3, 20), dtype=dtype)
        self.split_weights = torch.ones(resolution**3, dtype=dtype)
        self.sdf_init = torch.zeros((n1, n1, n1), dtype=dtype)  # initial distances, world units
        self.xi = 1.0
        self._base = torch.as_tensor(grid_points(resolution, bound), dtype=dtype)

    @property
    def cell_size(self) -> float:
        return 2.0 * self.bound / self.resolution

    @property
    def base_points(self) -> torch.Tensor:
        return self._base

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"sdf": self.sdf, "deform": self.deform,
                "interp_weights": self.interp_weights, "split_weights": self.split_weights}

    def requires_grad_(self, flag: bool = True) -> "DeformableGrid":
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def clamp_deform_(self) -> "DeformableGrid":
        half = self.cell_size / 2
        with torch.no_grad():
            self.deform.clamp_(-half, half)
        return self

    def effective_sdf(self) -> torch.Tensor:
        return self.xi * self.sdf

    def vertex_positions(self) -> torch.Tensor:
        return self._base + self.deform


def xi_schedule(step: int, total: int, start: float = 1.0, end: float = 3.0) -> float:
    """Gain ramps linearly over the first half of refinement, then holds."""
    half = max(total / 2.0, 1.0)
    return start + (end - start) * min(step / half, 1.0)


def extract_mesh_differentiable(grid: DeformableGrid, iso: float = 0.0) -> TriangleMesh:
    """Marching cubes on ``xi * sdf`` at deformed positions, differentiable in sdf and deform."""
    return _extract(grid.effective_sdf(), grid.vertex_positions(), iso)


def scale_sdf(grid_or_values, xi: float):
    """``s <- xi * s / max{|s_j| : s_j < 0}``; a grid is updated in place and returned."""
    is_grid = isinstance(grid_or_values, DeformableGrid)
    s = grid_or_values.sdf.detach() if is_grid else torch.as_tensor(grid_or_values, dtype=torch.float64)
    neg = s[s < 0]
    if len(neg) == 0:
        raise GeometryError("degenerate coarse geometry: the SDF has no inside (negative) values")
    m = -neg.min()
    out = xi * s / m
    out[s == -m] = -xi
    if not is_grid:
        return out
    with torch.no_grad():
        grid_or_values.sdf.copy_(out)
    return grid_or_values


# SDF initialization -----------------------------------------------------------

@nb.njit(cache=True)
def _axis_crossings(tri, axis_vals, a, u, v, eps_u, eps_v):
    """Per grid column along axis ``a``: number of surface crossings above each vertex, and in total."""
    n1 = axis_vals.shape[0]
    lo = axis_vals[0]
    h = axis_vals[1] - axis_vals[0]
    diff = np.zeros((n1, n1, n1 + 1), np.int64)
    for f in range(tri.shape[0]):
        pu0, pv0 = tri[f, 0, u], tri[f, 0, v]
        pu1, pv1 = tri[f, 1, u], tri[f, 1, v]
        pu2, pv2 = tri[f, 2, u], tri[f, 2, v]
        area = (pu1 - pu0) * (pv2 - pv0) - (pu2 - pu0) * (pv1 - pv0)
        if area == 0.0:
            continue
        iu0 = max(int(np.ceil((min(pu0, pu1, pu2) - eps_u - lo) / h)), 0)
        iu1 = min(int(np.floor((max(pu0, pu1, pu2) - eps_u - lo) / h)), n1 - 1)
        iv0 = max(int(np.ceil((min(pv0, pv1, pv2) - eps_v - lo) / h)), 0)
        iv1 = min(int(np.floor((max(pv0, pv1, pv2) - eps_v - lo) / h)), n1 - 1)
        for iu in range(iu0, iu1 + 1):
            qu = axis_vals[iu] + eps_u
            for iv in range(iv0, iv1 + 1):
                qv = axis_vals[iv] + eps_v
                w0 = (pu1 - qu) * (pv2 - qv) - (pu2 - qu) * (pv1 - qv)
                w1 = (pu2 - qu) * (pv0 - qv) - (pu0 - qu) * (pv2 - qv)
                w2 = (pu0 - qu) * (pv1 - qv) - (pu1 - qu) * (pv0 - qv)
                if area > 0:
                    if w0 <= 0 or w1 <= 0 or w2 <= 0:
                        continue
                elif w0 >= 0 or w1 >= 0 or w2 >= 0:
                    continue
                hit = (w0 * tri[f, 0, a] + w1 * tri[f, 1, a] + w2 * tri[f, 2, a]) / area
                # vertices strictly below the hit see it on their forward ray
                k = int(np.floor((hit - lo) / h)) + 1
                if k > 0 and axis_vals[min(k - 1, n1 - 1)] >= hit:
                    k -= 1
                k = min(max(k, 0), n1)
                diff[iu, iv, 0] += 1
                diff[iu, iv, k] -= 1
    above = np.zeros((n1, n1, n1), np.int64)
    total = np.zeros((n1, n1), np.int64)
    for iu in range(n1):
        for iv in range(n1):
            acc = 0
            for k in range(n1):
                acc += diff[iu, iv, k]
                above[iu, iv, k] = acc
            total[iu, iv] = diff[iu, iv, 0]
    return above, total


def inside_votes(tri: np.ndarray, axis_vals: np.ndarray) -> np.ndarray:
    """Odd-parity votes (0..6) from rays cast both ways along each axis, indexed [x, y, z]."""
    h = axis_vals[1] - axis_vals[0]
    eps = (np.sqrt(2.0) * 1e-6 * h, np.pi * 1e-6 * h)  # keeps rays off edges and vertices
    votes = np.zeros((len(axis_vals),) * 3, np.int64)
    for a, (u, v) in enumerate(((1, 2), (0, 2), (0, 1))):
        above, total = _axis_crossings(tri, axis_vals, a, u, v, eps[0], eps[1])
        below = total[:, :, None] - above
        odd = (above % 2) + (below % 2)          # indexed [u, v, a]
        order = np.argsort((u, v, a))
        votes += np.transpose(odd, order)
    return votes


def signed_distance(points_grid: np.ndarray, axis_vals: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    v, f = mesh.numpy()
    if len(f) == 0:
        raise GeometryError("cannot initialize an SDF from a mesh with zero faces")
    pts = points_grid.reshape(-1, 3)
    dist, face, closest = closest_points(pts, v, f)
    votes = inside_votes(np.ascontiguousarray(v[f]), axis_vals).reshape(-1)
    sign = np.where(votes > 3, -1.0, 1.0)
    tie = votes == 3
    if np.any(tie):
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        outward = np.einsum("ij,ij->i", pts[tie] - closest[tie], n[face[tie]])
        sign[tie] = np.where(outward < 0, -1.0, 1.0)
    return (sign * dist).reshape(points_grid.shape[:3])


def init_sdf_from_mesh(grid: DeformableGrid, mesh: TriangleMesh) -> DeformableGrid:
    """Set ``grid.sdf`` (and ``grid.sdf_init``) to the signed distance to ``mesh`` in world units."""
    axis = grid_axis(grid.resolution, grid.bound)
    sdf = torch.as_tensor(signed_distance(grid.base_points.double().numpy(), axis, mesh), dtype=grid.sdf.dtype)
    with torch.no_grad():
        grid.sdf.copy_(sdf)
        grid.sdf_init.copy_(sdf)
    return grid


# regularizers -----------------------------------------------------------------

def sdf_regularizer(grid: DeformableGrid, margin_cells: float = 2.0) -> torch.Tensor:
    """Mean softplus(-s) over vertices that started more than ``margin_cells`` outside the surface."""
    far = grid.sdf_init > margin_cells * grid.cell_size
    if not bool(far.any()):
        return grid.sdf.sum() * 0.0
    return F.softplus(-grid.sdf[far]).mean()


def normal_consistency(mesh: TriangleMesh) -> torch.Tensor:
    """Mean ``1 - cos`` between normals of faces sharing an edge (0 without adjacency)."""
    _, adj = mesh.adjacency()
    pairs = adj[(adj >= 0).all(axis=1)] if len(adj) else adj
    if len(pairs) == 0:
        return mesh.vertices.sum() * 0.0
    n = mesh.face_normals()
    i, j = torch.as_tensor(pairs[:, 0]), torch.as_tensor(pairs[:, 1])
    return (1.0 - (n[i] * n[j]).sum(1)).mean()


# coarse-to-fine bridge ------------------------------------------------------------

def mesh_from_density(density: np.ndarray, iso: float = 0.5, bound: float = 1.0,
                      fill_cavities: bool = False) -> TriangleMesh:
    """Surface where the clamped density ``min(density, 1)`` crosses ``iso``.

    With ``fill_cavities``, regions enclosed by the occupied set (the hollow
    inside of a splat shell) count as solid, so only the outer surface remains.
    """
    field = np.minimum(density, 1.0)
    if fill_cavities:
        field = np.where(ndimage.binary_fill_holes(field > iso), 1.0, field)
    return marching_cubes(iso - field, 0.0, bound)


def recenter(mesh: TriangleMesh, extent: float = 0.9) -> tuple[TriangleMesh, np.ndarray, float]:
    """Move the bounding-box center to the origin, shrinking only if the mesh
    would leave ``[-extent, extent]^3``. Returns (mesh, offset, scale)."""
    v, _ = mesh.numpy()
    lo, hi = v.min(0), v.max(0)
    offset = -(lo + hi) / 2
    half = float(((hi - lo) / 2).max())
    scale = min(1.0, extent / half) if half > 0 else 1.0
    return mesh.transformed(scale, offset * scale), offset, scale


# checkpoint ---------------------------------------------------------------------------

def save_grid(path: str | Path, grid: DeformableGrid, texture=None) -> None:
    arrays = {
        "meta": np.array([grid.resolution, grid.bound, grid.xi], np.float64),
        **{k: v.detach().double().numpy() for k, v in grid.parameters().items()},
        "sdf_init": grid.sdf_init.detach().double().numpy(),
    }
    if texture is not None:
        arrays.update({"tex." + k: v.detach().double().numpy() for k, v in texture.state_dict().items()})
    write_arrays(path, _MAGIC, _VERSION, arrays)


def load_grid(path: str | Path, texture=None, dtype: torch.dtype = torch.float64) -> DeformableGrid:
    arrays = read_arrays(path, _MAGIC, _VERSION)
    res, bound, xi = arrays["meta"]
    grid = DeformableGrid(int(res), float(bound), dtype)
    grid.xi = float(xi)
    with torch.no_grad():
        for k, p in {**grid.parameters(), "sdf_init": grid.sdf_init}.items():
            if arrays[k].shape != tuple(p.shape):
                raise CheckpointError(f"grid array {k!r} has shape {arrays[k].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arrays[k]))
    if texture is not None:
        state = {k[4:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("tex.")}
        if not state:
            raise CheckpointError("checkpoint holds no texture")
        texture.load_state_dict({k: v.to(texture.state_dict()[k].dtype) for k, v in state.items()})
    return grid
