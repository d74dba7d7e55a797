"""Spherical camera poses, projection conventions and pose samplers.

World frame: +Y up. A camera at azimuth ``a`` and elevation ``e`` sits at
``r * (cos e sin a, sin e, cos e cos a)`` and looks at the origin. Camera
space is x right, y up, z towards the viewer (the camera looks down -z).
Pixel ``(row, col)`` has its center at image coordinates ``(col + 0.5, row + 0.5)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float
    radius: float = 2.0
    fov: float = 49.1
    resolution: int = 64

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if not 0 < self.fov < 180:
            raise ValueError(f"fov must lie in (0, 180), got {self.fov}")
        if self.resolution < 1:
            raise ValueError("resolution must be at least one pixel")

    def with_resolution(self, resolution: int) -> "CameraPose":
        return replace(self, resolution=int(resolution))

    @property
    def position(self) -> np.ndarray:
        a, e = math.radians(self.azimuth), math.radians(self.elevation)
        return self.radius * np.array(
            [math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)]
        )

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.resolution / math.tan(math.radians(self.fov) / 2)

    @property
    def view_dir(self) -> np.ndarray:
        """Unit vector from the origin towards the camera (headlight direction)."""
        return self.position / self.radius


@dataclass(frozen=True)
class RelativePose:
    delta_azimuth: float
    delta_elevation: float
    delta_radius: float


@dataclass(frozen=True)
class PoseRanges:
    azimuth: tuple[float, float] = (-180.0, 180.0)
    elevation: tuple[float, float] = (-45.0, 45.0)
    radius: float = 2.0
    fov: float = 49.1

    def __post_init__(self):
        for lo, hi in (self.azimuth, self.elevation):
            if lo > hi:
                raise ValueError(f"range ({lo}, {hi}) is not ordered")


def wrap_degrees(angle: float) -> float:
    """Wrap an angle to [-180, 180) (shortest arc)."""
    return (angle + 180.0) % 360.0 - 180.0


def view_transform(pose: CameraPose) -> np.ndarray:
    """4x4 world-to-camera rigid transform."""
    a = math.radians(pose.azimuth)
    back = pose.view_dir
    # derivative of the orbit w.r.t. azimuth; well defined even at the poles
    right = np.array([math.cos(a), 0.0, -math.sin(a)])
    up = np.cross(back, right)
    rot = np.stack([right, up, back])
    out = np.eye(4)
    out[:3, :3] = rot
    out[:3, 3] = -rot @ pose.position
    return out


def balance_factor(pose: CameraPose, ref: CameraPose) -> float:
    """Texture blend weight ``(cos(d_azimuth) + 1) / 2``: 1 at the reference azimuth, 0 opposite."""
    d = math.radians(pose.azimuth - ref.azimuth)
    return min(1.0, max(0.0, 0.5 * (math.cos(d) + 1.0)))


def relative_pose(pose: CameraPose, ref: CameraPose) -> RelativePose:
    return RelativePose(
        delta_azimuth=wrap_degrees(pose.azimuth - ref.azimuth),
        delta_elevation=pose.elevation - ref.elevation,
        delta_radius=pose.radius - ref.radius,
    )


def sample_uniform(ranges: PoseRanges, rng: np.random.Generator, resolution: int = 64) -> CameraPose:
    azimuth = rng.uniform(*ranges.azimuth) if ranges.azimuth[0] < ranges.azimuth[1] else ranges.azimuth[0]
    elevation = (
        rng.uniform(*ranges.elevation) if ranges.elevation[0] < ranges.elevation[1] else ranges.elevation[0]
    )
    return CameraPose(float(azimuth), float(elevation), ranges.radius, ranges.fov, resolution)


def turntable(n: int = 8, radius: float = 2.0, fov: float = 49.1, resolution: int = 64) -> list[CameraPose]:
    """``n`` evenly spaced azimuths at zero elevation, offset half a step from the reference azimuth 0."""
    step = 360.0 / n
    return [
        CameraPose(wrap_degrees(-180.0 + step / 2 + k * step), 0.0, radius, fov, resolution)
        for k in range(n)
    ]


@dataclass
class PoseSampler:
    """Error-driven azimuth sampler with truncated-Gaussian rejection of the reference region.

    The azimuth circle is split into ``n_regions`` equal arcs starting at -180.
    Each arc keeps a bounded FIFO of recent prior errors; after warm-up a region
    is drawn with probability proportional to its mean error, except for one
    region rejected per draw. The rejected index comes from a truncated normal
    on [-1, 1] split into ``n_regions`` equal intervals, with the middle interval
    mapped onto the region containing the reference azimuth.
    """

    ranges: PoseRanges = field(default_factory=PoseRanges)
    n_regions: int = 5
    capacity: int = 32
    warmup_steps: int = 100
    rejection_std: float = 0.5
    ref_azimuth: float = 0.0
    queues: list = field(init=False)
    last_rejection: int | None = field(init=False, default=None)

    def __post_init__(self):
        if self.n_regions < 2:
            raise ValueError("need at least two regions to reject one")
        self.queues = [deque(maxlen=self.capacity) for _ in range(self.n_regions)]

    @property
    def region_width(self) -> float:
        return 360.0 / self.n_regions

    def region_of(self, azimuth: float) -> int:
        a = wrap_degrees(azimuth) if not azimuth == 180.0 else 180.0
        return min(int((a + 180.0) // self.region_width), self.n_regions - 1)

    def record_error(self, azimuth: float, error: float) -> None:
        if not math.isfinite(error):
            raise ValueError(f"error must be finite, got {error}")
        self.queues[self.region_of(azimuth)].append(float(error))

    def rejection_index(self, u: float) -> int:
        """Map a draw ``u`` in [-1, 1] to a region index (center interval -> reference region)."""
        k = min(int((u + 1.0) / 2.0 * self.n_regions), self.n_regions - 1)
        return (self.region_of(self.ref_azimuth) + k - self.n_regions // 2) % self.n_regions

    def region_weights(self) -> np.ndarray:
        means = [float(np.mean(q)) if q else None for q in self.queues]
        seen = [m for m in means if m is not None]
        fill = float(np.mean(seen)) if seen else 1.0
        return np.array([fill if m is None else m for m in means])

    def _truncated_normal(self, rng: np.random.Generator) -> float:
        while True:
            u = rng.normal(0.0, self.rejection_std)
            if -1.0 <= u <= 1.0:
                return float(u)

    def sample(self, rng: np.random.Generator, iteration: int, resolution: int = 64) -> CameraPose:
        if iteration < self.warmup_steps:
            self.last_rejection = None
            return sample_uniform(self.ranges, rng, resolution)
        n = self.rejection_index(self._truncated_normal(rng))
        self.last_rejection = n
        w = self.region_weights()
        w[n] = 0.0
        if w.sum() <= 0:
            w = np.ones(self.n_regions)
            w[n] = 0.0
        region = int(rng.choice(self.n_regions, p=w / w.sum()))
        lo = -180.0 + region * self.region_width
        azimuth = float(rng.uniform(lo, lo + self.region_width))
        elevation = float(rng.uniform(*self.ranges.elevation))
        return CameraPose(azimuth, elevation, self.ranges.radius, self.ranges.fov, resolution)
