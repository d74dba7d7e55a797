"""Disentangled appearance: two multiresolution feature grids blended by the
view's balance factor, a small shared decoder to albedo, and Lambertian shading."""

from __future__ import annotations

import logging
import math

import torch
from torch import nn

log = logging.getLogger(__name__)

_PRIMES = (1, 2654435761, 805459861)
_CORNER_BITS = torch.tensor([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


class MultiresEncoding(nn.Module):
    """Trilinearly interpolated feature grids at geometrically spaced resolutions over [-1, 1]^3.

    A level whose vertex count fits in the table is indexed densely; finer
    levels hash vertex coordinates into the table.
    """

    def __init__(self, levels: int = 8, features: int = 2, log2_table: int = 16,
                 min_res: int = 16, max_res: int = 256, init_scale: float = 1e-4,
                 generator: torch.Generator | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.levels, self.features, self.table_size = levels, features, 2**log2_table
        growth = (max_res / min_res) ** (1.0 / max(levels - 1, 1))
        self.resolutions = [int(math.floor(min_res * growth**l + 1e-9)) for l in range(levels)]
        table = torch.rand((levels, self.table_size, features), generator=generator, dtype=dtype)
        self.tables = nn.Parameter((2 * table - 1) * init_scale)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def _index(self, corner: torch.Tensor, res: int) -> torch.Tensor:
        n1 = res + 1
        if n1**3 <= self.table_size:
            return (corner[..., 0] * n1 + corner[..., 1]) * n1 + corner[..., 2]
        h = corner[..., 0] * _PRIMES[0]
        h = torch.bitwise_xor(h, corner[..., 1] * _PRIMES[1])
        h = torch.bitwise_xor(h, corner[..., 2] * _PRIMES[2])
        return torch.remainder(h, self.table_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(P, 3) points in [-1, 1]^3 -> (P, levels * features)."""
        unit = (x.to(self.tables.dtype) + 1.0) / 2.0
        weights, indices = [], []
        for level, res in enumerate(self.resolutions):
            pos = unit * res
            base = pos.detach().floor().clamp(0, res - 1)
            frac = (pos - base).unsqueeze(1)                                  # (P, 1, 3)
            corners = base.long().unsqueeze(1) + _CORNER_BITS                 # (P, 8, 3)
            weights.append(torch.where(_CORNER_BITS.bool(), frac, 1.0 - frac).prod(-1))
            indices.append(self._index(corners, res) + level * self.table_size)
        # one gather over all levels keeps the backward to a single scatter
        flat = self.tables.reshape(-1, self.features)
        feat = flat[torch.stack(indices, 1)]                                  # (P, L, 8, F)
        out = (torch.stack(weights, 1).unsqueeze(-1) * feat).sum(2)           # (P, L, F)
        return out.reshape(len(x), -1)


class TextureField(nn.Module):
    """Albedo from ``(1 - eta) * H_back(x) + eta * H_ref(x)`` through a 2-layer MLP."""

    def __init__(self, levels: int = 8, features: int = 2, log2_table: int = 16,
                 min_res: int = 16, max_res: int = 256, hidden: int = 32,
                 seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        enc = dict(levels=levels, features=features, log2_table=log2_table,
                   min_res=min_res, max_res=max_res, generator=gen, dtype=dtype)
        self.h_ref = MultiresEncoding(**enc)
        self.h_back = MultiresEncoding(**enc)
        self.hidden = nn.Linear(self.h_ref.out_dim, hidden, dtype=dtype)
        self.out = nn.Linear(hidden, 3, dtype=dtype)
        for layer in (self.hidden, self.out):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_((2 * torch.rand(layer.weight.shape, generator=gen, dtype=dtype) - 1) * bound)
                layer.bias.copy_((2 * torch.rand(layer.bias.shape, generator=gen, dtype=dtype) - 1) * bound)
        self.only: str | None = None  # debug view: "ref" or "back" zeroes the other encoding
        self._warned = False

    def _clamp(self, x: torch.Tensor) -> torch.Tensor:
        if not self._warned and bool((x.detach().abs() > 1.0).any()):
            log.warning("texture queries outside [-1, 1]^3 are clamped to the domain")
            self._warned = True
        return x.clamp(-1.0, 1.0)

    def encode(self, x: torch.Tensor, eta) -> torch.Tensor:
        x = self._clamp(x)
        eta = torch.as_tensor(eta, dtype=self.h_ref.tables.dtype)
        if eta.ndim == 1:
            eta = eta[:, None]
        # an encoding with zero weight is not evaluated at all
        use_ref = self.only != "back" and bool((eta != 0).any())
        use_back = self.only != "ref" and bool((eta != 1).any())
        ref = self.h_ref(x) if use_ref else 0.0
        back = self.h_back(x) if use_back else 0.0
        if not use_ref and not use_back:
            return torch.zeros((len(x), self.h_ref.out_dim), dtype=self.h_ref.tables.dtype)
        return (1.0 - eta) * back + eta * ref

    def decode(self, feature: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.out(torch.relu(self.hidden(feature))))

    def albedo(self, x: torch.Tensor, eta) -> torch.Tensor:
        return self.decode(self.encode(x, eta))

    def forward(self, x, eta):
        return self.albedo(x, eta)


def shade(albedo: torch.Tensor, normal: torch.Tensor, light_dir: torch.Tensor,
          ambient: float = 0.2, diffuse: float = 0.8) -> torch.Tensor:
    """``albedo * (ambient + diffuse * max(0, n . l))`` clamped to [0, 1]."""
    ndotl = (normal * light_dir).sum(-1, keepdim=True).clamp_min(0.0)
    return (albedo * (ambient + diffuse * ndotl)).clamp(0.0, 1.0)
