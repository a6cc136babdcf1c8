"""fieldcalib: camera intrinsics and gravity recovery from dense perspective
fields, plus a panorama-based synthetic data generator and evaluation
metrics."""

from .camera import (
    CameraIntrinsics,
    CameraModel,
    make_from_vfov,
    project,
    projection_jacobian,
    unproject,
    vfov,
)
from .fields import GridSpec, PerspectiveField, default_grid, render_fields
from .gravity import (
    GravityState,
    angles_from_gravity,
    gravity_angular_error,
    gravity_from_angles,
    gravity_from_world_pose,
    tangent_update,
)
from .solver import CalibrationEstimate, SolveConfig, eq2_objective, initialize, solve

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CameraModel",
    "make_from_vfov",
    "project",
    "projection_jacobian",
    "unproject",
    "vfov",
    "GridSpec",
    "PerspectiveField",
    "default_grid",
    "render_fields",
    "GravityState",
    "angles_from_gravity",
    "gravity_angular_error",
    "gravity_from_angles",
    "gravity_from_world_pose",
    "tangent_update",
    "CalibrationEstimate",
    "SolveConfig",
    "eq2_objective",
    "initialize",
    "solve",
    "__version__",
]
