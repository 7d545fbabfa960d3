"""Articulated part-based 3D shape fitting from sparse image feature ensembles."""

__version__ = "0.1.0"

from .skeleton import (
    Skeleton,
    SkeletonSpec,
    BoneTransforms,
    build_skeleton,
    forward_kinematics,
    load_template,
    resting_pose,
)
from .parts import (
    MlpParams,
    PartMesh,
    PartSet,
    SphereTopology,
    make_sphere,
    mlp_forward,
    positional_encode,
    symmetrize,
)
from .render import Camera, RenderBuffers, hard_rasterize, project, soft_silhouette

__all__ = [
    "Skeleton",
    "SkeletonSpec",
    "BoneTransforms",
    "build_skeleton",
    "forward_kinematics",
    "load_template",
    "resting_pose",
    "MlpParams",
    "PartMesh",
    "PartSet",
    "SphereTopology",
    "make_sphere",
    "mlp_forward",
    "positional_encode",
    "symmetrize",
    "Camera",
    "RenderBuffers",
    "hard_rasterize",
    "project",
    "soft_silhouette",
]
