"""Perspective-field forward model: dense up-vector and latitude grids from
(intrinsics, gravity), plus the residuals and parameter Jacobians consumed
by the calibration solver.

The up vector at a pixel is the normalized image of the zenith through the
projection Jacobian evaluated at the unit viewing ray; the latitude is the
asin of the ray/zenith dot product.  Residuals stack row-major over grid
samples with components (u_x, u_y, latitude) innermost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .camera import (
    CameraIntrinsics,
    CameraModel,
    K1_BOUNDS,
    XI_BOUNDS,
    projection_jacobian,
    unproject,
)
from .gravity import GravityState, tangent_update

__all__ = [
    "GridSpec",
    "PerspectiveField",
    "default_grid",
    "grid_pixel_centers",
    "latitude_at_pixel",
    "up_at_pixel",
    "render_fields",
    "field_residual",
    "field_jacobian",
]

UP_DEGENERACY_EPS = 1e-12

# Finite-difference steps for the residual Jacobian.
FD_STEP_LOGF = 1e-5
FD_STEP_DIST = 1e-5
FD_STEP_DELTA = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """Subsampling of the pixel grid: one field sample per ``stride`` pixels,
    placed at the sample-cell center plus a subpixel ``offset``."""

    stride: int = 1
    offset: float = 0.0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if abs(self.offset) >= self.stride / 2.0:
            raise ValueError("offset must stay within half a stride")

    def dims(self, width: int, height: int) -> Tuple[int, int]:
        """(grid_height, grid_width) for an image of the given size."""
        gh, gw = height // self.stride, width // self.stride
        if gh < 4 or gw < 4:
            raise ValueError(
                f"stride {self.stride} leaves fewer than 4 samples on a {width}x{height} image"
            )
        return gh, gw


def default_grid(cam: CameraIntrinsics, max_samples: int = 64) -> GridSpec:
    """Stride so the solver sees at most ``max_samples`` per axis."""
    stride = max(1, math.ceil(max(cam.width, cam.height) / max_samples))
    return GridSpec(stride=stride)


def grid_pixel_centers(width: int, height: int, grid: GridSpec) -> np.ndarray:
    """(gh, gw, 2) array of sample pixel coordinates."""
    gh, gw = grid.dims(width, height)
    u = grid.offset + (np.arange(gw) + 0.5) * grid.stride
    v = grid.offset + (np.arange(gh) + 0.5) * grid.stride
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


@dataclass
class PerspectiveField:
    """Dense up-vector / latitude grids with optional per-sample confidence.

    ``up`` is (H, W, 2) with unit rows wherever ``valid``; ``latitude`` is
    (H, W) radians in [-pi/2, pi/2]; ``confidence`` is (H, W) non-negative
    or None; ``valid`` is a (H, W) boolean mask.
    """

    up: np.ndarray
    latitude: np.ndarray
    confidence: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.up = np.asarray(self.up, dtype=float)
        self.latitude = np.asarray(self.latitude, dtype=float)
        if self.up.ndim != 3 or self.up.shape[-1] != 2:
            raise ValueError(f"up must be (H, W, 2), got {self.up.shape}")
        if self.latitude.shape != self.up.shape[:2]:
            raise ValueError("latitude grid does not match up grid")
        if self.valid is None:
            self.valid = np.ones(self.latitude.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.latitude.shape:
                raise ValueError("valid mask does not match grids")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=float)
            if self.confidence.shape != self.latitude.shape:
                raise ValueError("confidence grid does not match grids")
            if np.any(self.confidence[self.valid] < 0):
                raise ValueError("confidence must be non-negative")
        norms = np.linalg.norm(self.up[self.valid], axis=-1)
        if norms.size and np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("valid up entries must be unit norm")
        lats = self.latitude[self.valid]
        if lats.size and np.any(np.abs(lats) > math.pi / 2 + 1e-9):
            raise ValueError("latitudes must lie in [-pi/2, pi/2]")

    @property
    def height(self) -> int:
        return self.latitude.shape[0]

    @property
    def width(self) -> int:
        return self.latitude.shape[1]

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def copy(self) -> "PerspectiveField":
        return PerspectiveField(
            up=self.up.copy(),
            latitude=self.latitude.copy(),
            confidence=None if self.confidence is None else self.confidence.copy(),
            valid=self.valid.copy(),
        )


def latitude_at_pixel(cam: CameraIntrinsics, g, pixel) -> Tuple[float, bool]:
    """Latitude (radians) of the viewing ray at one pixel; (nan, False) if
    the pixel is not unprojectable."""
    gv = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    ray, ok = unproject(cam, np.asarray(pixel, dtype=float))
    if not ok:
        return math.nan, False
    return float(np.arcsin(np.clip(np.dot(ray, gv), -1.0, 1.0))), True


def up_at_pixel(cam: CameraIntrinsics, g, pixel) -> Tuple[np.ndarray, bool]:
    """Unit image-plane up vector at one pixel; (nan-pair, False) when the
    pixel is unprojectable or the projected zenith is degenerate there."""
    gv = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    ray, ok = unproject(cam, np.asarray(pixel, dtype=float))
    if not ok:
        return np.full(2, np.nan), False
    J, okj = projection_jacobian(cam, ray)
    if not okj:
        return np.full(2, np.nan), False
    u = J @ gv
    n = float(np.linalg.norm(u))
    if n <= UP_DEGENERACY_EPS:
        return np.full(2, np.nan), False
    return u / n, True


def _render_arrays(cam: CameraIntrinsics, gv: np.ndarray, grid: GridSpec,
                   clamp_invalid: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized field evaluation.

    Returns (up (gh,gw,2), lat (gh,gw), strict_valid (gh,gw)).  With
    ``clamp_invalid`` the up/lat values are additionally defined (via
    boundary-clamped rays) at samples whose strict validity is False.
    """
    pix = grid_pixel_centers(cam.width, cam.height, grid)
    gh, gw = pix.shape[:2]
    flat = pix.reshape(-1, 2)
    rays, ok = unproject(cam, flat, clamp_to_valid=clamp_invalid)
    J, okj = projection_jacobian(cam, rays)
    lat = np.arcsin(np.clip(rays @ gv, -1.0, 1.0))
    upv = np.einsum("nij,j->ni", J, gv)
    norms = np.linalg.norm(upv, axis=-1)
    nondeg = norms > UP_DEGENERACY_EPS
    valid = ok & okj & nondeg
    defined = (okj & nondeg) if clamp_invalid else valid
    upv = np.where(defined[:, None], upv / np.where(norms == 0, 1.0, norms)[:, None], 0.0)
    lat = np.where(defined if clamp_invalid else valid, lat, 0.0)
    return upv.reshape(gh, gw, 2), lat.reshape(gh, gw), valid.reshape(gh, gw)


def render_fields(cam: CameraIntrinsics, g, grid: Optional[GridSpec] = None) -> PerspectiveField:
    """Render the up-vector and latitude fields induced by (cam, g).

    Non-projectable or degenerate samples are masked out and zero-filled;
    confidence is left absent.
    """
    gv = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    if grid is None:
        grid = default_grid(cam)
    up, lat, valid = _render_arrays(cam, gv, grid, clamp_invalid=False)
    up = np.where(valid[..., None], up, 0.0)
    lat = np.where(valid, lat, 0.0)
    return PerspectiveField(up=up, latitude=lat, confidence=None, valid=valid)


def _deduce_grid(observed: PerspectiveField, cam: CameraIntrinsics) -> GridSpec:
    sx = cam.width / observed.width
    sy = cam.height / observed.height
    if abs(sx - round(sx)) > 1e-9 or abs(sy - round(sy)) > 1e-9 or round(sx) != round(sy):
        raise ValueError(
            f"observed {observed.width}x{observed.height} grid does not tile the "
            f"{cam.width}x{cam.height} image with a uniform integer stride"
        )
    return GridSpec(stride=int(round(sx)))


def field_residual(observed: PerspectiveField, cam: CameraIntrinsics, g,
                   grid: Optional[GridSpec] = None,
                   clamp_invalid: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Stacked residual (observed - model) and matching weights.

    One entry per component (u_x, u_y, latitude), row-major over the
    observed-valid samples.  Weights repeat the per-sample confidence
    (1 where absent); samples the model cannot evaluate get weight 0.
    """
    gv = g.as_array() if isinstance(g, GravityState) else np.asarray(g, dtype=float)
    if grid is None:
        grid = _deduce_grid(observed, cam)
    gh, gw = grid.dims(cam.width, cam.height)
    if (gh, gw) != (observed.height, observed.width):
        raise ValueError(
            f"observed grid {observed.width}x{observed.height} does not match the "
            f"render grid {gw}x{gh}"
        )
    up_m, lat_m, valid_m = _render_arrays(cam, gv, grid, clamp_invalid=clamp_invalid)
    mask = observed.valid
    if clamp_invalid:
        # even clamped rays can hit the measure-zero up degeneracy
        model_ok = np.linalg.norm(up_m[mask], axis=-1) > 0.5
    else:
        model_ok = valid_m[mask]

    res = np.stack([
        observed.up[mask][:, 0] - up_m[mask][:, 0],
        observed.up[mask][:, 1] - up_m[mask][:, 1],
        observed.latitude[mask] - lat_m[mask],
    ], axis=-1)
    res = np.where(model_ok[:, None], res, 0.0)

    conf = observed.confidence[mask] if observed.confidence is not None else np.ones(res.shape[0])
    w = np.where(model_ok, conf, 0.0)
    return res.reshape(-1), np.repeat(w, 3)


def _distortion_bounds(model: CameraModel) -> Tuple[float, float]:
    return K1_BOUNDS if model is CameraModel.SIMPLE_RADIAL else XI_BOUNDS


def n_intrinsic_params(model: CameraModel) -> int:
    return 1 if model is CameraModel.PINHOLE else 2


def field_jacobian(cam: CameraIntrinsics, g, grid: Optional[GridSpec] = None,
                   observed: Optional[PerspectiveField] = None,
                   clamp_invalid: bool = False) -> np.ndarray:
    """Residual Jacobian w.r.t. (log f, distortion, delta1, delta2) by
    central finite differences (distortion column absent for pinhole).

    Gravity is differentiated through the tangent retraction at delta = 0.
    Rows align with :func:`field_residual` for ``observed`` (a self-rendered
    field when omitted); since the residual is observed - model, the columns
    are the negated model-field derivatives.
    """
    gs = g if isinstance(g, GravityState) else GravityState(np.asarray(g, dtype=float))
    if grid is None:
        grid = default_grid(cam) if observed is None else _deduce_grid(observed, cam)
    if observed is None:
        observed = render_fields(cam, gs, grid)

    def residual_at(cam_p: CameraIntrinsics, g_p) -> np.ndarray:
        r, _ = field_residual(observed, cam_p, g_p, grid=grid, clamp_invalid=clamp_invalid)
        return r

    n_int = n_intrinsic_params(cam.model)
    cols = []

    h = FD_STEP_LOGF
    logf = math.log(cam.f)
    r_plus = residual_at(cam.with_params(f=math.exp(logf + h)), gs)
    r_minus = residual_at(cam.with_params(f=math.exp(logf - h)), gs)
    cols.append((r_plus - r_minus) / (2.0 * h))

    if n_int == 2:
        lo, hi = _distortion_bounds(cam.model)
        d = float(cam.distortion)
        d_plus = min(d + FD_STEP_DIST, hi)
        d_minus = max(d - FD_STEP_DIST, lo)
        span = d_plus - d_minus
        r_plus = residual_at(cam.with_params(distortion=d_plus), gs)
        r_minus = residual_at(cam.with_params(distortion=d_minus), gs)
        cols.append((r_plus - r_minus) / span)

    for k in range(2):
        step = np.zeros(2)
        step[k] = FD_STEP_DELTA
        r_plus = residual_at(cam, tangent_update(gs, step))
        r_minus = residual_at(cam, tangent_update(gs, -step))
        cols.append((r_plus - r_minus) / (2.0 * FD_STEP_DELTA))

    return np.stack(cols, axis=-1)
