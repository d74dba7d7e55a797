"""Angular composition of two score priors.

The ratio ``G = |grad_rho| / |grad_phi|`` of the diverse prior's image
gradient to the 3D-aware prior's is kept inside ``[lower, upper]`` bounds that
depend on the view's balance factor ``eta`` and on the iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

UPPER_FRONT_ETA = 0.75
LOWER_ETA = 0.5
MIN_UPPER = 1e-6


def _lerp(a: float, b: float, frac: float) -> float:
    return a + (b - a) * frac


@dataclass(frozen=True)
class ComposeSchedule:
    total_iters: int
    mode: str = "editing"
    upper_start: float = 100.0
    upper_end: float = 10.0
    lower_start: float = 10.0
    lower_end: float = 1.0
    front_eta_threshold: float = UPPER_FRONT_ETA
    lower_eta_threshold: float = LOWER_ETA

    def __post_init__(self):
        if self.mode not in ("editing", "enhancement"):
            raise ValueError(f"unknown compose mode {self.mode!r}")
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if min(self.upper_start, self.upper_end, self.lower_start, self.lower_end) <= 0:
            raise ValueError("bounds must be positive")

    @classmethod
    def editing(cls, total_iters: int) -> "ComposeSchedule":
        return cls(total_iters, "editing", 100.0, 10.0)

    @classmethod
    def enhancement(cls, total_iters: int) -> "ComposeSchedule":
        return cls(total_iters, "enhancement", 2.0, 0.5)

    def bounds(self, eta: float, iteration: float) -> tuple[float, float | None]:
        """(upper, lower) at balance factor ``eta``; ``lower`` is None where inactive."""
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {eta}")
        frac = min(max(iteration / self.total_iters, 0.0), 1.0)
        upper = _lerp(self.upper_start, self.upper_end, frac)
        if eta > self.front_eta_threshold:
            upper *= 1.0 - eta
        upper = max(upper, MIN_UPPER)
        lower = None
        if eta < self.lower_eta_threshold:
            # the enhancement schedule's upper bound can fall below the lower one; keep the window non-empty
            lower = min(_lerp(self.lower_start, self.lower_end, frac), upper)
        return upper, lower


def bounds(schedule: ComposeSchedule, eta: float, iteration: float) -> tuple[float, float | None]:
    return schedule.bounds(eta, iteration)


@dataclass
class Composition:
    grad_phi: torch.Tensor
    grad_rho: torch.Tensor
    ratio: float              # G before rescaling (inf when grad_phi vanishes)
    upper: float
    lower: float | None
    clamped: str | None       # "upper", "lower" or None
    degenerate: bool = False  # grad_phi was all zero; both passed through

    @property
    def composed_ratio(self) -> float:
        phi = float(torch.linalg.vector_norm(self.grad_phi.double()))
        rho = float(torch.linalg.vector_norm(self.grad_rho.double()))
        return math.inf if phi == 0 else rho / phi


def compose(grad_phi: torch.Tensor, grad_rho: torch.Tensor, eta: float, iteration: float,
            schedule: ComposeSchedule) -> Composition:
    """Rescale one of the two prior gradients so their magnitude ratio respects the bounds.

    Only one side is ever touched: ``grad_rho`` shrinks when ``G`` exceeds the
    upper bound, otherwise ``grad_phi`` shrinks when ``G`` is under an active
    lower bound. A vanishing ``grad_phi`` leaves both untouched and sets
    ``degenerate``.
    """
    if grad_phi.shape != grad_rho.shape:
        raise ValueError(f"gradient shapes differ: {tuple(grad_phi.shape)} vs {tuple(grad_rho.shape)}")
    upper, lower = schedule.bounds(eta, iteration)
    phi_norm = float(torch.linalg.vector_norm(grad_phi.double()))
    rho_norm = float(torch.linalg.vector_norm(grad_rho.double()))
    if phi_norm == 0.0:
        return Composition(grad_phi, grad_rho, math.inf, upper, lower, None, degenerate=True)
    g = rho_norm / phi_norm
    if g > upper:
        return Composition(grad_phi, grad_rho * (upper / g), g, upper, lower, "upper")
    if lower is not None and g < lower:
        return Composition(grad_phi * (g / lower), grad_rho, g, upper, lower, "lower")
    return Composition(grad_phi, grad_rho, g, upper, lower, None)
