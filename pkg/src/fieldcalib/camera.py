"""Camera models: projection, unprojection, and projection Jacobians.

Three centered camera models are supported: pinhole, pinhole with a single
quadratic radial distortion coefficient (SimpleRadial), and the unified
camera model (UCM) with sphere offset xi.

Conventions:
  * pixel coordinates are continuous, origin at the top-left image corner,
    +u right, +v down, pixel centers at half-integers;
  * the principal point is fixed at exactly half the image dimensions;
  * camera frame is +x right, +y down, +z forward.

All point-wise operations are vectorized over a leading batch shape and
return a validity mask instead of raising: a False entry means the point
(or pixel) is outside the model's valid domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

__all__ = [
    "CameraModel",
    "CameraIntrinsics",
    "make_from_vfov",
    "vfov",
    "project",
    "unproject",
    "projection_jacobian",
]

# Bounds shared by the intrinsics validator, the sampler, and the solver.
K1_BOUNDS = (-0.7, 0.7)
XI_BOUNDS = (0.0, 3.0)

# Slack so that solver-side finite-difference probes at a clamped bound
# still construct (steps are <= 1e-5).
_BOUND_SLACK = 1e-4


class CameraModel(Enum):
    PINHOLE = "pinhole"
    SIMPLE_RADIAL = "simple_radial"
    UCM = "ucm"

    @classmethod
    def from_tag(cls, tag: str) -> "CameraModel":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown camera model tag {tag!r}") from None


@dataclass(frozen=True)
class CameraIntrinsics:
    """Shared per-view camera parameters.

    ``distortion`` is k1 for SIMPLE_RADIAL, xi for UCM, and None for
    PINHOLE.  The principal point is always the image center.
    """

    model: CameraModel
    width: int
    height: int
    f: float
    distortion: Optional[float] = None

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("image dimensions must be >= 2")
        if not (self.f > 0 and math.isfinite(self.f)):
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.model is CameraModel.PINHOLE:
            if self.distortion is not None:
                raise ValueError("pinhole cameras carry no distortion parameter")
        else:
            if self.distortion is None:
                raise ValueError(f"{self.model.value} requires a distortion parameter")
            lo, hi = K1_BOUNDS if self.model is CameraModel.SIMPLE_RADIAL else XI_BOUNDS
            if not (lo - _BOUND_SLACK <= self.distortion <= hi + _BOUND_SLACK):
                raise ValueError(
                    f"{self.model.value} distortion {self.distortion} outside [{lo}, {hi}]"
                )

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def k1(self) -> float:
        if self.model is not CameraModel.SIMPLE_RADIAL:
            raise AttributeError("k1 is only defined for simple_radial")
        return float(self.distortion)

    @property
    def xi(self) -> float:
        if self.model is not CameraModel.UCM:
            raise AttributeError("xi is only defined for ucm")
        return float(self.distortion)

    def with_params(self, f: Optional[float] = None, distortion: Optional[float] = None) -> "CameraIntrinsics":
        """Copy with updated focal / distortion (used by the solver)."""
        out = self
        if f is not None:
            out = replace(out, f=float(f))
        if distortion is not None:
            if self.model is CameraModel.PINHOLE:
                raise ValueError("pinhole has no distortion parameter")
            out = replace(out, distortion=float(distortion))
        return out

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Uniformly rescale the image (and focal) by ``factor``.

        The normalized geometry is invariant under this, so vFoV,
        distortion, and perspective fields are unchanged.
        """
        w, h = self.width * factor, self.height * factor
        wi, hi = round(w), round(h)
        if abs(w - wi) > 1e-6 or abs(h - hi) > 1e-6:
            raise ValueError(f"scale factor {factor} does not give integral dimensions")
        return replace(self, width=wi, height=hi, f=self.f * factor)


def _as_points(arr) -> Tuple[np.ndarray, bool]:
    """Coerce to (..., 3) float array; report whether input was a single point."""
    a = np.asarray(arr, dtype=float)
    if a.shape == (3,):
        return a[None, :], True
    if a.ndim < 1 or a.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) points, got shape {a.shape}")
    return a, False


def _as_pixels(arr) -> Tuple[np.ndarray, bool]:
    a = np.asarray(arr, dtype=float)
    if a.shape == (2,):
        return a[None, :], True
    if a.ndim < 1 or a.shape[-1] != 2:
        raise ValueError(f"expected (..., 2) pixels, got shape {a.shape}")
    return a, False


def project(cam: CameraIntrinsics, points) -> Tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points to pixels.

    Returns ``(uv, valid)``; entries with ``valid == False`` are not
    projectable (behind the camera, or outside the model's domain) and the
    corresponding uv rows are NaN.  Projection is invariant to positive
    scaling of the input points.
    """
    P, single = _as_points(points)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    uv = np.full(P.shape[:-1] + (2,), np.nan)

    if cam.model is CameraModel.UCM:
        xi = cam.xi
        d = np.linalg.norm(P, axis=-1)
        denom = xi * d + Z
        valid = (d > 0) & (denom > 1e-12 * np.maximum(d, 1.0))
        dd = np.where(valid, denom, 1.0)
        uv[..., 0] = cam.f * X / dd + cam.cx
        uv[..., 1] = cam.f * Y / dd + cam.cy
    else:
        valid = Z > 0
        zz = np.where(valid, Z, 1.0)
        x = X / zz
        y = Y / zz
        if cam.model is CameraModel.SIMPLE_RADIAL:
            r2 = x * x + y * y
            s = 1.0 + cam.k1 * r2
            x, y = x * s, y * s
        uv[..., 0] = cam.f * x + cam.cx
        uv[..., 1] = cam.f * y + cam.cy

    uv = np.where(valid[..., None], uv, np.nan)
    if single:
        return uv[0], bool(valid[0])
    return uv, valid


def _invert_radial(rd: np.ndarray, k1: float) -> Tuple[np.ndarray, np.ndarray]:
    """Solve r*(1 + k1*r^2) = rd for r >= 0 by Newton from rd.

    Returns (r, converged).  For k1 < 0 only rd below the fold-over value
    (2/3)*sqrt(-1/(3 k1)) is invertible.
    """
    r = rd.copy()
    for _ in range(20):
        fval = r * (1.0 + k1 * r * r) - rd
        fprime = 1.0 + 3.0 * k1 * r * r
        safe = np.where(np.abs(fprime) < 1e-12, 1.0, fprime)
        step = np.where(np.abs(fprime) < 1e-12, 0.0, fval / safe)
        r = r - step
    resid = np.abs(r * (1.0 + k1 * r * r) - rd)
    converged = (resid <= 1e-12) & (r >= 0) & (1.0 + 3.0 * k1 * r * r > 0)
    return r, converged


def _radial_rd_max(k1: float) -> float:
    """Largest invertible distorted radius for k1 < 0 (inf for k1 >= 0)."""
    if k1 >= 0:
        return math.inf
    r_star = math.sqrt(-1.0 / (3.0 * k1))
    return r_star * (1.0 + k1 * r_star * r_star)


def _ucm_r_max(xi: float) -> float:
    """Radius of the valid normalized image circle for xi > 1 (inf otherwise)."""
    if xi <= 1.0:
        return math.inf
    return 1.0 / math.sqrt(xi * xi - 1.0)


def unproject(cam: CameraIntrinsics, pixels, clamp_to_valid: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Unproject pixels to unit rays.

    Returns ``(rays, valid)`` with unit-norm rays satisfying
    ``project(cam, ray) == pixel`` (within 1e-6 px) wherever valid.

    With ``clamp_to_valid=True``, pixels outside the invertible domain are
    radially clamped to just inside its boundary before inversion, and the
    returned mask still reports the original validity.  This keeps the
    solver's residuals defined (and continuous) on a fixed sample set while
    intrinsics move through infeasible regions.
    """
    p, single = _as_pixels(pixels)
    mx = (p[..., 0] - cam.cx) / cam.f
    my = (p[..., 1] - cam.cy) / cam.f
    rays = np.empty(p.shape[:-1] + (3,))

    if cam.model is CameraModel.PINHOLE:
        rays[..., 0] = mx
        rays[..., 1] = my
        rays[..., 2] = 1.0
        valid = np.ones(p.shape[:-1], dtype=bool)
    elif cam.model is CameraModel.SIMPLE_RADIAL:
        rd = np.hypot(mx, my)
        rd_max = _radial_rd_max(cam.k1)
        valid = rd < rd_max
        rd_eff = rd
        if clamp_to_valid and math.isfinite(rd_max):
            # pin out-of-domain pixels just inside the radial fold
            rd_eff = np.minimum(rd, rd_max * (1.0 - 1e-6))
        r, ok = _invert_radial(rd_eff, cam.k1)
        valid = valid & ok
        safe = np.where(rd == 0, 1.0, rd)
        rays[..., 0] = mx / safe * r
        rays[..., 1] = my / safe * r
        rays[..., 2] = 1.0
    else:  # UCM, closed-form inverse of the sphere-plane mapping
        xi = cam.xi
        r2 = mx * mx + my * my
        r2_max = _ucm_r_max(xi) ** 2
        valid = r2 < r2_max if math.isfinite(r2_max) else np.ones(p.shape[:-1], dtype=bool)
        if clamp_to_valid and math.isfinite(r2_max):
            scale2 = np.minimum(1.0, r2_max * (1.0 - 1e-9) / np.maximum(r2, 1e-300))
            s = np.sqrt(scale2)
            mx, my, r2 = mx * s, my * s, r2 * scale2
        disc = 1.0 + (1.0 - xi * xi) * r2
        disc = np.maximum(disc, 0.0)
        k = (xi + np.sqrt(disc)) / (1.0 + r2)
        rays[..., 0] = k * mx
        rays[..., 1] = k * my
        rays[..., 2] = k - xi

    norm = np.linalg.norm(rays, axis=-1, keepdims=True)
    rays = rays / np.where(norm == 0, 1.0, norm)
    if not clamp_to_valid:
        rays = np.where(valid[..., None], rays, np.nan)
    if single:
        return rays[0], bool(valid[0])
    return rays, valid


def projection_jacobian(cam: CameraIntrinsics, points) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic 2x3 Jacobian d(pixel)/d(point) of the projection at P.

    Returns ``(J, valid)`` with J of shape (..., 2, 3).
    """
    P, single = _as_points(points)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    J = np.full(P.shape[:-1] + (2, 3), np.nan)

    if cam.model is CameraModel.PINHOLE:
        valid = Z > 0
        zz = np.where(valid, Z, 1.0)
        fz = cam.f / zz
        J[..., 0, 0] = fz
        J[..., 0, 1] = 0.0
        J[..., 0, 2] = -fz * X / zz
        J[..., 1, 0] = 0.0
        J[..., 1, 1] = fz
        J[..., 1, 2] = -fz * Y / zz
    elif cam.model is CameraModel.SIMPLE_RADIAL:
        k1 = cam.k1
        valid = Z > 0
        zz = np.where(valid, Z, 1.0)
        x = X / zz
        y = Y / zz
        r2 = x * x + y * y
        s = 1.0 + k1 * r2
        # d(pix)/d(x,y) = f * (s*I + 2*k1*[x,y][x,y]^T), d(x,y)/dP = (1/Z)[[1,0,-x],[0,1,-y]]
        a00 = s + 2.0 * k1 * x * x
        a01 = 2.0 * k1 * x * y
        a11 = s + 2.0 * k1 * y * y
        J[..., 0, 0] = cam.f * a00 / zz
        J[..., 0, 1] = cam.f * a01 / zz
        J[..., 0, 2] = cam.f * (-(a00 * x + a01 * y)) / zz
        J[..., 1, 0] = cam.f * a01 / zz
        J[..., 1, 1] = cam.f * a11 / zz
        J[..., 1, 2] = cam.f * (-(a01 * x + a11 * y)) / zz
    else:  # UCM: pix = f * (X, Y) / (xi*d + Z) + c
        xi = cam.xi
        d = np.linalg.norm(P, axis=-1)
        denom = xi * d + Z
        valid = (d > 0) & (denom > 1e-12 * np.maximum(d, 1.0))
        dd = np.where(valid, denom, 1.0)
        dsafe = np.where(d == 0, 1.0, d)
        # d(denom)/dP = xi*P/d + e_z
        gx = xi * X / dsafe
        gy = xi * Y / dsafe
        gz = xi * Z / dsafe + 1.0
        J[..., 0, 0] = cam.f * (1.0 / dd - X * gx / dd**2)
        J[..., 0, 1] = cam.f * (-X * gy / dd**2)
        J[..., 0, 2] = cam.f * (-X * gz / dd**2)
        J[..., 1, 0] = cam.f * (-Y * gx / dd**2)
        J[..., 1, 1] = cam.f * (1.0 / dd - Y * gy / dd**2)
        J[..., 1, 2] = cam.f * (-Y * gz / dd**2)

    J = np.where(valid[..., None, None], J, np.nan)
    if single:
        return J[0], bool(valid[0])
    return J, valid


def _edge_ray_angle(cam: CameraIntrinsics, axis: str = "v") -> float:
    """Angle (rad) between the optical axis and the unprojected edge-midpoint ray."""
    if axis == "v":
        pix = np.array([cam.cx, float(cam.height)])
    else:
        pix = np.array([float(cam.width), cam.cy])
    ray, ok = unproject(cam, pix)
    if not ok:
        raise ValueError(
            f"{cam.model.value} camera cannot unproject its {axis}-edge midpoint "
            "(field of view is not representable)"
        )
    return float(np.arccos(np.clip(ray[2], -1.0, 1.0)))


def _axis_angle(ray: np.ndarray) -> float:
    return math.acos(float(np.clip(ray[2], -1.0, 1.0)))


def vfov(cam: CameraIntrinsics) -> float:
    """Vertical field of view in degrees: the angle spanned by the rays
    unprojected at the top and bottom edge midpoints ``(cx, 0)`` and
    ``(cx, height)``.

    Measured as the sum of each ray's angle from the optical axis, which
    equals the angle between the two rays for any FoV up to 180 deg and
    stays well-defined for the wider UCM cameras.
    """
    top, ok_t = unproject(cam, np.array([cam.cx, 0.0]))
    bot, ok_b = unproject(cam, np.array([cam.cx, float(cam.height)]))
    if not (ok_t and ok_b):
        raise ValueError("vertical edge midpoints are not unprojectable for this camera")
    return math.degrees(_axis_angle(top) + _axis_angle(bot))


def hfov(cam: CameraIntrinsics) -> float:
    """Horizontal field of view in degrees (left/right edge midpoints)."""
    lef, ok_l = unproject(cam, np.array([0.0, cam.cy]))
    rig, ok_r = unproject(cam, np.array([float(cam.width), cam.cy]))
    if not (ok_l and ok_r):
        raise ValueError("horizontal edge midpoints are not unprojectable for this camera")
    return math.degrees(_axis_angle(lef) + _axis_angle(rig))


def _focal_for_half_angle(model: CameraModel, half_extent: float, half_angle: float,
                          distortion: Optional[float]) -> float:
    """Focal length such that the ray at ``half_extent`` pixels from the
    principal point makes ``half_angle`` with the optical axis."""
    if model is CameraModel.PINHOLE:
        return half_extent / math.tan(half_angle)
    if model is CameraModel.SIMPLE_RADIAL:
        k1 = float(distortion)
        r = math.tan(half_angle)
        if 1.0 + 3.0 * k1 * r * r <= 0:
            raise ValueError(
                f"simple_radial with k1={k1} cannot represent a half-angle of "
                f"{math.degrees(half_angle):.2f} deg (radial fold-over)"
            )
        rd = r * (1.0 + k1 * r * r)
        return half_extent / rd
    # UCM: bisection on f; angle(f) is monotone decreasing on the valid bracket.
    xi = float(distortion)
    t_max = math.acos(max(-1.0, min(1.0, -1.0 / xi))) if xi > 1.0 else math.acos(-min(xi, 1.0))
    if half_angle >= t_max:
        raise ValueError(
            f"ucm with xi={xi} cannot reach a half-angle of {math.degrees(half_angle):.2f} deg"
        )

    def angle_at(f: float) -> float:
        m = half_extent / f
        r2 = m * m
        disc = 1.0 + (1.0 - xi * xi) * r2
        if disc < 0:
            return math.nan
        k = (xi + math.sqrt(disc)) / (1.0 + r2)
        z = k - xi
        norm = math.sqrt(k * k * r2 + z * z)
        return math.acos(max(-1.0, min(1.0, z / norm)))

    f_lo = half_extent * math.sqrt(max(xi * xi - 1.0, 0.0)) * (1.0 + 1e-9)
    f_lo = max(f_lo, half_extent * 1e-9)
    f_hi = half_extent * 4.0 * (1.0 + xi) / half_angle
    for _ in range(200):
        if angle_at(f_hi) < half_angle:
            break
        f_hi *= 2.0
    else:
        raise ValueError("ucm focal bisection: no upper bracket")
    if not (angle_at(f_hi) < half_angle < angle_at(f_lo)):
        raise ValueError("ucm focal bisection: no root in bracket")
    for _ in range(200):
        f_mid = 0.5 * (f_lo + f_hi)
        a_mid = angle_at(f_mid)
        if abs(a_mid - half_angle) < 1e-10:
            return f_mid
        if a_mid > half_angle:
            f_lo = f_mid
        else:
            f_hi = f_mid
        if f_hi - f_lo < 1e-13 * f_hi:
            break
    f_mid = 0.5 * (f_lo + f_hi)
    if abs(angle_at(f_mid) - half_angle) > 1e-8:
        raise ValueError("ucm focal bisection failed to converge")
    return f_mid


def make_from_vfov(model: CameraModel, width: int, height: int, vfov_deg: float,
                   distortion: Optional[float] = None) -> CameraIntrinsics:
    """Build intrinsics with the requested vertical field of view.

    The focal length is solved so that the actual unprojected edge-midpoint
    ray angle matches ``vfov_deg`` (round trip with :func:`vfov` holds to
    1e-6 deg for every model, distorted or not).
    """
    ok = (1.0 < vfov_deg <= 200.0) if model is CameraModel.UCM else (1.0 < vfov_deg < 180.0)
    if not ok:
        raise ValueError(f"vfov {vfov_deg} deg out of range for {model.value}")
    half = math.radians(vfov_deg) / 2.0
    f = _focal_for_half_angle(model, height / 2.0, half, distortion)
    return CameraIntrinsics(model=model, width=int(width), height=int(height), f=f,
                            distortion=None if model is CameraModel.PINHOLE else float(distortion))


def make_from_hfov(model: CameraModel, width: int, height: int, hfov_deg: float,
                   distortion: Optional[float] = None) -> CameraIntrinsics:
    """Build intrinsics from a horizontal field of view (used by the UCM
    sampler, which is specified in terms of horizontal FoV)."""
    ok = (1.0 < hfov_deg <= 200.0) if model is CameraModel.UCM else (1.0 < hfov_deg < 180.0)
    if not ok:
        raise ValueError(f"hfov {hfov_deg} deg out of range for {model.value}")
    half = math.radians(hfov_deg) / 2.0
    f = _focal_for_half_angle(model, width / 2.0, half, distortion)
    return CameraIntrinsics(model=model, width=int(width), height=int(height), f=f,
                            distortion=None if model is CameraModel.PINHOLE else float(distortion))
