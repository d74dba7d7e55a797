"""Score priors: the image-space gradient contract, test priors and the timestep scheduler.

A prior looks at a rendered view and returns the gradient it wants to push
into that image (``grad_image``), which the optimization loops backpropagate
through the renderer. Real diffusion priors would live behind the same
interface; here the oracle prior renders a known ground-truth mesh and the
constant prior returns a fixed, exactly controllable gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .camera import CameraPose

T_MIN, T_MAX = 20.0, 980.0


class PriorError(RuntimeError):
    pass


@dataclass
class ScoreFeedback:
    grad_image: torch.Tensor  # (H, W, 3)
    magnitude: float
    error: float

    @classmethod
    def from_grad(cls, grad: torch.Tensor, error: float) -> "ScoreFeedback":
        grad = grad.detach()
        return cls(grad, float(torch.linalg.vector_norm(grad.double())), float(error))


class ScorePrior:
    """Base prior. Subclasses implement :meth:`score`; priors are immutable once built."""

    def score(self, rendered: torch.Tensor, pose: CameraPose, t: float, condition=None) -> ScoreFeedback:
        raise NotImplementedError

    def timestep_transform(self, t: float, eta: float) -> float:
        """Hook for priors that rescale the timestep by view (identity here)."""
        return t


@dataclass(frozen=True)
class TimestepScheduler:
    """Interval annealing: ``t`` is drawn uniformly from a window whose center moves
    linearly from ``t_start`` to ``t_end``, updated once every ``period`` steps."""

    total_steps: int
    t_start: float = T_MAX
    t_end: float = T_MIN
    period: int = 50
    width: float = 100.0

    def center(self, step: int) -> float:
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        block = (step // self.period) * self.period
        return self.t_start + (self.t_end - self.t_start) * block / self.total_steps

    def interval(self, step: int) -> tuple[float, float]:
        c = self.center(step)
        lo = min(max(c - self.width / 2, T_MIN), T_MAX)
        hi = min(max(c + self.width / 2, T_MIN), T_MAX)
        return lo, hi

    def sample(self, step: int, rng: np.random.Generator) -> float:
        lo, hi = self.interval(step)
        if hi <= lo:
            return lo
        return float(min(max(rng.uniform(lo, hi), lo), hi))


class OracleBank:
    """Ground-truth view source: renders a colored mesh at any queried pose."""

    def __init__(self, mesh):
        if mesh is None or len(mesh.faces) == 0:
            raise PriorError("oracle bank has no geometry to render")
        self.mesh = mesh
        self._cache: dict = {}

    def render(self, pose: CameraPose) -> tuple[torch.Tensor, torch.Tensor]:
        from .mesh_render import render_mesh  # deferred: mesh_render pulls in the texture stack

        key = (pose.azimuth, pose.elevation, pose.radius, pose.fov, pose.resolution)
        if key not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            with torch.no_grad():
                img = render_mesh(self.mesh, None, pose)
            self._cache[key] = (img.rgb.detach().double(), img.mask.detach().double())
        return self._cache[key]


@dataclass
class OraclePrior(ScorePrior):
    """Photometric stand-in for a diffusion prior: pulls the render towards the
    ground truth at the same pose, optionally blurred more at high timesteps."""

    bank: OracleBank
    sigma_max: float = 2.0
    blur: bool = True

    def blur_sigma(self, t: float) -> float:
        if not self.blur:
            return 0.0
        return self.sigma_max * max(0.0, t - T_MIN) / (T_MAX - T_MIN)

    def target(self, pose: CameraPose, t: float) -> torch.Tensor:
        rgb, _ = self.bank.render(pose)
        sigma = self.blur_sigma(t)
        if sigma > 0:
            rgb = torch.as_tensor(gaussian_filter(rgb.numpy(), sigma=(sigma, sigma, 0), mode="constant"))
        return rgb

    def score(self, rendered, pose, t, condition=None) -> ScoreFeedback:
        target = self.target(pose, t)
        if tuple(target.shape) != tuple(rendered.shape):
            raise PriorError(f"render {tuple(rendered.shape)} does not match target {tuple(target.shape)}")
        h, w = rendered.shape[:2]
        resid = rendered.detach().double() - target
        grad = (2.0 / (h * w)) * resid
        return ScoreFeedback.from_grad(grad.to(rendered.dtype), float(resid.abs().mean()))


@dataclass
class ConstantPrior(ScorePrior):
    """Returns ``magnitude * direction / |direction|`` regardless of the render."""

    direction: torch.Tensor
    magnitude: float
    _unit: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.magnitude < 0:
            raise ValueError("magnitude must be non-negative")
        d = torch.as_tensor(self.direction).double()
        norm = float(torch.linalg.vector_norm(d))
        self._unit = d / norm if norm > 0 else torch.zeros_like(d)

    def score(self, rendered, pose, t, condition=None) -> ScoreFeedback:
        unit = self._unit
        if unit.shape != rendered.shape:
            unit = _resize_direction(unit, rendered.shape)
        grad = (self.magnitude * unit).to(rendered.dtype)
        return ScoreFeedback(grad, float(self.magnitude), float(self.magnitude))


def _resize_direction(unit: torch.Tensor, shape) -> torch.Tensor:
    # nearest-neighbour resize, renormalized to unit length
    h, w = shape[:2]
    rows = (np.arange(h) * unit.shape[0] // h).astype(int)
    cols = (np.arange(w) * unit.shape[1] // w).astype(int)
    out = unit[rows][:, cols]
    norm = float(torch.linalg.vector_norm(out))
    return out / norm if norm > 0 else out

