"""Gravity direction in the camera frame: angle parameterization and the
unit-sphere tangent retraction used by the solver.

The zenith vector is ``g = [sin(roll)*cos(pitch), -sin(pitch),
cos(roll)*cos(pitch)]``.  Under this parameterization an upright camera
facing the horizon has ``g = (0, -1, 0)``, i.e. pitch = +pi/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GravityState",
    "gravity_from_angles",
    "angles_from_gravity",
    "gravity_from_world_pose",
    "tangent_update",
    "gravity_angular_error",
]

_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class GravityState:
    """Unit zenith direction in the camera frame."""

    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        v = np.asarray(self.g, dtype=float)
        if v.shape != (3,):
            raise ValueError(f"gravity must be a 3-vector, got shape {v.shape}")
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > _UNIT_TOL:
            raise ValueError(f"gravity must be unit norm, got |g| = {n}")
        object.__setattr__(self, "g", v / n)

    @property
    def roll(self) -> float:
        return angles_from_gravity(self.g)[0]

    @property
    def pitch(self) -> float:
        return angles_from_gravity(self.g)[1]

    @property
    def roll_deg(self) -> float:
        return math.degrees(self.roll)

    @property
    def pitch_deg(self) -> float:
        return math.degrees(self.pitch)

    def as_array(self) -> np.ndarray:
        return np.array(self.g, dtype=float)


def gravity_from_angles(roll: float, pitch: float) -> GravityState:
    """Zenith vector from roll and pitch in radians."""
    if not -math.pi < roll <= math.pi + 1e-12:
        raise ValueError(f"roll {roll} outside (-pi, pi]")
    if not -math.pi / 2 - 1e-12 <= pitch <= math.pi / 2 + 1e-12:
        raise ValueError(f"pitch {pitch} outside [-pi/2, pi/2]")
    return GravityState(np.array([
        math.sin(roll) * math.cos(pitch),
        -math.sin(pitch),
        math.cos(roll) * math.cos(pitch),
    ]))


def angles_from_gravity(g) -> tuple[float, float]:
    """(roll, pitch) in radians for a unit zenith vector.

    Inverse of :func:`gravity_from_angles` away from |pitch| = pi/2; at the
    gimbal lock roll is fixed to 0.
    """
    v = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > _UNIT_TOL:
        raise ValueError(f"expected a unit vector, got norm {n}")
    v = v / n
    pitch = -math.asin(max(-1.0, min(1.0, v[1])))
    if abs(v[0]) < 1e-15 and abs(v[2]) < 1e-15:
        return 0.0, pitch
    return math.atan2(v[0], v[2]), pitch


def gravity_from_world_pose(R, world_up=(0.0, 0.0, 1.0)) -> GravityState:
    """Zenith in the camera frame for a world-to-camera rotation R."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"R must be 3x3, got {R.shape}")
    if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6:
        raise ValueError("R is not orthonormal")
    up = np.asarray(world_up, dtype=float)
    g = R @ up
    return GravityState(g / np.linalg.norm(g))


def tangent_basis(g) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis of the tangent plane at g."""
    v = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    e = np.array([0.0, 1.0, 0.0])
    if abs(float(np.dot(v, e))) > 0.999:
        e = np.array([1.0, 0.0, 0.0])
    b1 = np.cross(e, v)
    b1 = b1 / np.linalg.norm(b1)
    b2 = np.cross(v, b1)
    return b1, b2


def tangent_update(g, delta) -> GravityState:
    """First-order retraction on the unit sphere: normalize(g + d1*b1 + d2*b2)."""
    v = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    d = np.asarray(delta, dtype=float)
    if d.shape != (2,):
        raise ValueError(f"delta must be a 2-vector, got shape {d.shape}")
    b1, b2 = tangent_basis(v)
    out = v + d[0] * b1 + d[1] * b2
    return GravityState(out / np.linalg.norm(out))


def gravity_angular_error(g_pred, g_gt) -> float:
    """Angle between two unit gravity vectors, in degrees."""
    a = g_pred.as_array() if isinstance(g_pred, GravityState) else np.asarray(g_pred, dtype=float)
    b = g_gt.as_array() if isinstance(g_gt, GravityState) else np.asarray(g_gt, dtype=float)
    dot = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return math.degrees(math.acos(max(-1.0, min(1.0, dot))))
