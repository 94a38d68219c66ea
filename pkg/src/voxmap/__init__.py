"""Egomotion-stabilized 3D voxel feature mapping from RGB-D streams."""

from .geometry import (
    GridSpec,
    PinholeCamera,
    RigidTransform,
    compose,
    project,
    trilinear_sample,
    warp_grid,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "PinholeCamera",
    "RigidTransform",
    "compose",
    "project",
    "trilinear_sample",
    "warp_grid",
]
