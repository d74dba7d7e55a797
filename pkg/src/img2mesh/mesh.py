"""Triangle meshes: container, primitives, OBJ I/O, closest-point queries and sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
import torch


@dataclass
class TriangleMesh:
    vertices: torch.Tensor                # (V, 3), may carry autograd history
    faces: torch.Tensor                   # (F, 3) int64
    colors: torch.Tensor | None = None    # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = torch.as_tensor(self.vertices)
        if not self.vertices.is_floating_point():
            self.vertices = self.vertices.double()
        self.faces = torch.as_tensor(self.faces, dtype=torch.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = torch.as_tensor(self.colors, dtype=self.vertices.dtype)
        if len(self.faces) and (int(self.faces.min()) < 0 or int(self.faces.max()) >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls, dtype=torch.float64) -> "TriangleMesh":
        return cls(torch.zeros((0, 3), dtype=dtype), torch.zeros((0, 3), dtype=torch.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.detach().double().numpy(), self.faces.numpy()

    def adjacency(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached :func:`edge_face_adjacency` of the faces."""
        cached = self.__dict__.get("_adjacency")
        if cached is None or cached[0] is not self.faces:
            cached = (self.faces, edge_face_adjacency(self.faces.numpy()))
            self.__dict__["_adjacency"] = cached
        return cached[1]

    def triangles(self) -> torch.Tensor:
        return self.vertices[self.faces]

    def face_normals(self, unit: bool = True) -> torch.Tensor:
        tri = self.triangles()
        n = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        if unit:
            n = n / n.norm(dim=1, keepdim=True).clamp_min(1e-20)
        return n

    def areas(self) -> np.ndarray:
        v, f = self.numpy()
        return triangle_areas(v, f)

    def volume(self) -> float:
        """Signed volume; positive for a closed mesh with outward-facing winding."""
        v, f = self.numpy()
        a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def detach(self) -> "TriangleMesh":
        colors = None if self.colors is None else self.colors.detach()
        return TriangleMesh(self.vertices.detach(), self.faces, colors)

    def transformed(self, scale: float, offset) -> "TriangleMesh":
        offset = torch.as_tensor(offset, dtype=self.vertices.dtype)
        return TriangleMesh(self.vertices * scale + offset, self.faces, self.colors)


def triangle_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def edge_face_adjacency(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Undirected edges (E, 2) and, per edge, up to two incident faces (-1 when missing).

    Edges with more than two incident faces keep the first two.
    """
    faces = np.asarray(faces, np.int64)
    if len(faces) == 0:
        return np.zeros((0, 2), np.int64), np.zeros((0, 2), np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    owner = np.tile(np.arange(len(faces)), 3)
    e = np.sort(e, axis=1)
    key = e[:, 0] * (int(faces.max()) + 1) + e[:, 1]
    order = np.argsort(key, kind="stable")
    key_sorted, owner_sorted = key[order], owner[order]
    start = np.flatnonzero(np.r_[True, key_sorted[1:] != key_sorted[:-1]])
    edges = e[order[start]]
    count = np.diff(np.r_[start, len(key)])
    first = start
    adj = np.full((len(edges), 2), -1, np.int64)
    adj[:, 0] = owner_sorted[first]
    two = count >= 2
    adj[two, 1] = owner_sorted[first[two] + 1]
    return edges, adj


# primitives ---------------------------------------------------------------

def icosphere(level: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        v, f = _subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriangleMesh(torch.as_tensor(v * radius + np.asarray(center, float)), torch.as_tensor(f))


def _subdivide(v, f):
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(3, -1) + len(v)
    mids = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = inv
    nf = np.concatenate([np.stack(x, 1) for x in ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))])
    return np.concatenate([v, mids]), nf


def torus(major: float = 0.35, minor: float = 0.15, n_major: int = 64, n_minor: int = 32) -> TriangleMesh:
    """Torus around the z axis."""
    u = np.arange(n_major) * 2 * np.pi / n_major
    w = np.arange(n_minor) * 2 * np.pi / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    ring = major + minor * np.cos(ww)
    v = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(ww)], -1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i2, j2 = (i + 1) % n_major, (j + 1) % n_minor
    p00, p10 = i * n_minor + j, i2 * n_minor + j
    p01, p11 = i * n_minor + j2, i2 * n_minor + j2
    f = np.concatenate([np.stack([p00, p10, p11], -1).reshape(-1, 3), np.stack([p00, p11, p01], -1).reshape(-1, 3)])
    return TriangleMesh(torch.as_tensor(v), torch.as_tensor(f))


def box(half_extents=(0.5, 0.5, 0.5)) -> TriangleMesh:
    h = np.asarray(half_extents, float)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]], np.int64)
    return TriangleMesh(torch.as_tensor(v), torch.as_tensor(f))


def smooth_colors(vertices, phase=(0.0, 2.1, 4.2), freq: float = 2.5) -> torch.Tensor:
    """Low-frequency per-vertex colors used for the synthetic ground-truth objects."""
    v = torch.as_tensor(vertices).double()
    ph = torch.as_tensor(phase, dtype=torch.float64)
    return 0.5 + 0.35 * torch.sin(freq * v + ph)


# OBJ ----------------------------------------------------------------------

def save_obj(path, mesh: TriangleMesh) -> None:
    v, f = mesh.numpy()
    lines = []
    if mesh.colors is not None:
        c = mesh.colors.detach().double().numpy()
        lines += [f"v {a:.9g} {b:.9g} {d:.9g} {r:.6g} {g:.6g} {bb:.6g}" for (a, b, d), (r, g, bb) in zip(v, c)]
    else:
        lines += [f"v {a:.9g} {b:.9g} {d:.9g}" for a, b, d in v]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in f]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    verts, cols, faces = [], [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                cols.append(vals[3:6])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    colors = torch.tensor(cols, dtype=torch.float64) if cols and len(cols) == len(verts) else None
    return TriangleMesh(torch.tensor(verts, dtype=torch.float64).reshape(-1, 3),
                        torch.tensor(faces, dtype=torch.int64).reshape(-1, 3), colors)


# closest points -------------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _closest_on_triangle(p, tri, f):
    """Closest point of triangle ``tri[f]`` to ``p`` (region tests after Ericson,
    "Real-Time Collision Detection" 5.1.5), written with scalars to stay allocation-free."""
    ax, ay, az = tri[f, 0, 0], tri[f, 0, 1], tri[f, 0, 2]
    bx, by, bz = tri[f, 1, 0], tri[f, 1, 1], tri[f, 1, 2]
    cx, cy, cz = tri[f, 2, 0], tri[f, 2, 1], tri[f, 2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = p[0] - ax, p[1] - ay, p[2] - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0 and d2 <= 0:
        return ax, ay, az
    bpx, bpy, bpz = p[0] - bx, p[1] - by, p[2] - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        w = d1 / (d1 - d3)
        return ax + w * abx, ay + w * aby, az + w * abz
    cpx, cpy, cpz = p[0] - cx, p[1] - cy, p[2] - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@nb.njit(cache=True)
def _build_bvh(tri, leaf_size):
    """Median-split bounding volume hierarchy; returns node boxes, links and the face order."""
    n = tri.shape[0]
    cent = np.empty((n, 3))
    for f in range(n):
        for a in range(3):
            cent[f, a] = (tri[f, 0, a] + tri[f, 1, a] + tri[f, 2, a]) / 3.0
    order = np.arange(n)
    cap = 2 * (n // max(leaf_size // 2, 1) + 1) + 1
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    child = np.full((cap, 2), -1, np.int64)
    span = np.zeros((cap, 2), np.int64)
    stack = np.empty((cap, 3), np.int64)  # node, start, stop
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, n
    top, count = 1, 1
    while top > 0:
        top -= 1
        node, start, stop = stack[top, 0], stack[top, 1], stack[top, 2]
        for a in range(3):
            lo[node, a] = np.inf
            hi[node, a] = -np.inf
        for k in range(start, stop):
            f = order[k]
            for c in range(3):
                for a in range(3):
                    lo[node, a] = min(lo[node, a], tri[f, c, a])
                    hi[node, a] = max(hi[node, a], tri[f, c, a])
        span[node, 0], span[node, 1] = start, stop
        if stop - start <= leaf_size:
            continue
        axis, width = 0, -1.0
        for a in range(3):
            cmin, cmax = np.inf, -np.inf
            for k in range(start, stop):
                cmin = min(cmin, cent[order[k], a])
                cmax = max(cmax, cent[order[k], a])
            if cmax - cmin > width:
                axis, width = a, cmax - cmin
        seg = order[start:stop]
        order[start:stop] = seg[np.argsort(cent[seg, axis], kind="mergesort")]
        mid = (start + stop) // 2
        for side, (s0, s1) in enumerate(((start, mid), (mid, stop))):
            child[node, side] = count
            stack[top, 0], stack[top, 1], stack[top, 2] = count, s0, s1
            top += 1
            count += 1
    return lo[:count], hi[:count], child[:count], span[:count], order


@nb.njit(cache=True)
def _query_bvh(points, tri, lo, hi, child, span, order):
    n = points.shape[0]
    best_d = np.full(n, np.inf)
    best_f = np.full(n, -1, np.int64)
    best_p = np.zeros((n, 3))
    stack = np.empty(128, np.int64)
    for i in range(n):
        p = points[i]
        if i > 0:
            # neighbouring queries are usually close: seed the bound with the last answer
            f = best_f[i - 1]
            qx, qy, qz = _closest_on_triangle(p, tri, f)
            best_d[i], best_f[i] = (p[0] - qx) ** 2 + (p[1] - qy) ** 2 + (p[2] - qz) ** 2, f
            best_p[i, 0], best_p[i, 1], best_p[i, 2] = qx, qy, qz
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            d2 = 0.0
            for a in range(3):
                g = max(lo[node, a] - p[a], 0.0, p[a] - hi[node, a])
                d2 += g * g
            if d2 >= best_d[i]:
                continue
            if child[node, 0] < 0:
                for k in range(span[node, 0], span[node, 1]):
                    f = order[k]
                    qx, qy, qz = _closest_on_triangle(p, tri, f)
                    d = (p[0] - qx) ** 2 + (p[1] - qy) ** 2 + (p[2] - qz) ** 2
                    if d < best_d[i]:
                        best_d[i], best_f[i] = d, f
                        best_p[i, 0], best_p[i, 1], best_p[i, 2] = qx, qy, qz
                continue
            # visit the nearer child first
            c0, c1 = child[node, 0], child[node, 1]
            e0, e1 = 0.0, 0.0
            for a in range(3):
                g0 = max(lo[c0, a] - p[a], 0.0, p[a] - hi[c0, a])
                g1 = max(lo[c1, a] - p[a], 0.0, p[a] - hi[c1, a])
                e0 += g0 * g0
                e1 += g1 * g1
            if e0 < e1:
                c0, c1 = c1, c0
            stack[top] = c0
            stack[top + 1] = c1
            top += 2
    return np.sqrt(best_d), best_f, best_p


def closest_points(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray):
    """Exact closest surface point per query: (distance, face index, closest point)."""
    points = np.ascontiguousarray(points, float).reshape(-1, 3)
    tri = np.ascontiguousarray(np.asarray(vertices, float)[np.asarray(faces, np.int64)])
    if len(tri) == 0:
        raise ValueError("mesh has no faces")
    lo, hi, child, span, order = _build_bvh(tri, 8)
    return _query_bvh(points, tri, lo, hi, child, span, order)


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the surface."""
    v, f = mesh.numpy()
    if len(f) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = triangle_areas(v, f)
    which = rng.choice(len(f), size=count, p=areas / areas.sum())
    r1, r2 = rng.random(count), rng.random(count)
    s = np.sqrt(r1)
    a, b, c = v[f[which, 0]], v[f[which, 1]], v[f[which, 2]]
    return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c
