"""Single image to textured mesh: a coarse Gaussian-splat stage, a bridge to a
deformable signed-distance grid, and a mesh refinement stage driven by score
priors (oracle and synthetic priors stand in for pretrained diffusion models)."""

from .camera import CameraPose, balance_factor
from .compose import ComposeSchedule, compose
from .gsplat import GaussianCloud
from .mesh import TriangleMesh
from .surface import DeformableGrid, GeometryError, marching_cubes, scale_sdf
from .texture import TextureField

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "balance_factor", "ComposeSchedule", "compose", "GaussianCloud", "TriangleMesh",
    "DeformableGrid", "GeometryError", "marching_cubes", "scale_sdf", "TextureField",
]
