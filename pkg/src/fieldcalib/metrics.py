"""Evaluation metrics: per-parameter errors, recall-curve AUC, pixel
projection error, and aggregated reports.

AUC@tau is the normalized integral of the error-recall curve up to tau,
computed in closed form from the sorted errors:
``(1 / (n * tau)) * sum_i max(0, tau - e_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics, project, unproject, vfov
from .fields import GridSpec, default_grid, grid_pixel_centers, render_fields
from .gravity import GravityState, angles_from_gravity

__all__ = [
    "ErrorSample",
    "MetricStats",
    "MetricReport",
    "auc_at",
    "error_sample",
    "pixel_projection_error",
    "report",
    "ANGULAR_AUC_THRESHOLDS_DEG",
    "FOCAL_AUC_THRESHOLDS",
]

ANGULAR_AUC_THRESHOLDS_DEG = (1.0, 5.0, 10.0)
FOCAL_AUC_THRESHOLDS = (0.05, 0.10, 0.20)


@dataclass(frozen=True)
class ErrorSample:
    """Per-view calibration errors against ground truth."""

    roll_err: float       # degrees
    pitch_err: float      # degrees
    vfov_err: float       # degrees
    focal_rel_err: float  # dimensionless
    up_field_err: float   # mean angular up error, radians
    lat_field_err: float  # mean absolute latitude error, radians

    def __post_init__(self):
        for name in ("roll_err", "pitch_err", "vfov_err", "focal_rel_err",
                     "up_field_err", "lat_field_err"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def auc_at(errors: Sequence[float], tau: float) -> float:
    """Area under the recall curve up to threshold tau, in [0, 1]."""
    errs = np.asarray(list(errors), dtype=float)
    if errs.size == 0:
        raise ValueError("auc_at requires a non-empty error list")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if np.any(errs < 0) or not np.isfinite(errs).all():
        raise ValueError("errors must be finite and non-negative")
    # fsum keeps the result exactly permutation-invariant
    return math.fsum(np.maximum(0.0, tau - errs)) / (errs.size * tau)


def _wrap_angle_err_deg(a_deg: float, b_deg: float) -> float:
    """|a - b| wrapped into [0, 180] degrees."""
    d = (a_deg - b_deg + 180.0) % 360.0 - 180.0
    return abs(d)


def error_sample(cam_pred: CameraIntrinsics, g_pred: GravityState,
                 cam_gt: CameraIntrinsics, g_gt: GravityState,
                 grid: Optional[GridSpec] = None) -> ErrorSample:
    """Errors of one predicted (camera, gravity) pair against ground truth.

    Field errors compare the fields rendered by both solutions over their
    joint validity mask on the ground-truth camera's default grid.
    """
    if (cam_pred.width, cam_pred.height) != (cam_gt.width, cam_gt.height):
        raise ValueError("prediction and ground truth image sizes differ")
    roll_p, pitch_p = angles_from_gravity(g_pred)
    roll_g, pitch_g = angles_from_gravity(g_gt)
    roll_err = _wrap_angle_err_deg(math.degrees(roll_p), math.degrees(roll_g))
    pitch_err = _wrap_angle_err_deg(math.degrees(pitch_p), math.degrees(pitch_g))
    vfov_err = abs(vfov(cam_pred) - vfov(cam_gt))
    focal_rel = abs(cam_pred.f - cam_gt.f) / cam_gt.f

    if grid is None:
        grid = default_grid(cam_gt)
    fp = render_fields(cam_pred, g_pred, grid)
    fg = render_fields(cam_gt, g_gt, grid)
    mask = fp.valid & fg.valid
    if not np.any(mask):
        raise ValueError("no jointly valid samples for field errors")
    du = fp.up[mask]
    dg = fg.up[mask]
    cross = du[:, 0] * dg[:, 1] - du[:, 1] * dg[:, 0]
    dot = np.einsum("ij,ij->i", du, dg)
    up_err = float(np.mean(np.abs(np.arctan2(cross, dot))))
    lat_err = float(np.mean(np.abs(fp.latitude[mask] - fg.latitude[mask])))
    return ErrorSample(
        roll_err=roll_err,
        pitch_err=pitch_err,
        vfov_err=vfov_err,
        focal_rel_err=focal_rel,
        up_field_err=up_err,
        lat_field_err=lat_err,
    )


def pixel_projection_error(cam_pred: CameraIntrinsics, cam_gt: CameraIntrinsics,
                           samples_per_axis: int = 32) -> Tuple[float, np.ndarray]:
    """Relative pixel projection error between two cameras of equal size.

    Ground-truth pixels on a uniform grid are unprojected with the true
    camera and reprojected with the prediction; each displacement is
    normalized by the image diagonal.  Returns (mean, per-pixel errors over
    the mutually valid set).
    """
    if (cam_pred.width, cam_pred.height) != (cam_gt.width, cam_gt.height):
        raise ValueError("cameras must share the image size")
    stride = max(1, min(cam_gt.width, cam_gt.height) // samples_per_axis)
    pix = grid_pixel_centers(cam_gt.width, cam_gt.height, GridSpec(stride)).reshape(-1, 2)
    rays, ok_gt = unproject(cam_gt, pix)
    uv, ok_pred = project(cam_pred, np.where(ok_gt[:, None], rays, [0.0, 0.0, 1.0]))
    ok = ok_gt & ok_pred
    if not np.any(ok):
        raise ValueError("no mutually valid pixels")
    diag = math.hypot(cam_gt.width, cam_gt.height)
    disp = np.linalg.norm(uv[ok] - pix[ok], axis=-1) / diag
    return float(disp.mean()), disp


@dataclass(frozen=True)
class MetricStats:
    mean: float
    median: float
    auc: Dict[str, float]


@dataclass(frozen=True)
class MetricReport:
    """Aggregated statistics per metric (mean, median, AUC at the standard
    thresholds; relative thresholds for the focal error)."""

    stats: Dict[str, MetricStats]
    count: int

    def to_json_dict(self) -> dict:
        return {
            "count": self.count,
            "metrics": {
                name: {"mean": s.mean, "median": s.median, "auc": dict(s.auc)}
                for name, s in self.stats.items()
            },
        }

    def to_text(self) -> str:
        rows = []
        header = f"{'metric':<16}{'mean':>10}{'med.':>10}"
        any_auc = next(iter(self.stats.values())).auc
        for key in any_auc:
            header += f"{('AUC@' + key):>12}"
        rows.append(header)
        rows.append("-" * len(header))
        for name, s in self.stats.items():
            line = f"{name:<16}{s.mean:>10.4f}{s.median:>10.4f}"
            for v in s.auc.values():
                line += f"{v:>12.4f}"
            rows.append(line)
        return "\n".join(rows)


def _stats(values: np.ndarray, thresholds: Sequence[float], labels: Sequence[str]) -> MetricStats:
    return MetricStats(
        mean=math.fsum(values) / values.size,
        median=float(np.median(values)),
        auc={lab: auc_at(values, tau) for lab, tau in zip(labels, thresholds)},
    )


def report(samples: Sequence[ErrorSample]) -> MetricReport:
    """Aggregate error samples into the standard report table."""
    if not samples:
        raise ValueError("report requires at least one sample")
    ang_labels = [f"{t:g}deg" for t in ANGULAR_AUC_THRESHOLDS_DEG]
    rel_labels = [f"{int(t * 100)}%" for t in FOCAL_AUC_THRESHOLDS]
    arr = {
        "roll_deg": np.array([s.roll_err for s in samples]),
        "pitch_deg": np.array([s.pitch_err for s in samples]),
        "vfov_deg": np.array([s.vfov_err for s in samples]),
        "focal_rel": np.array([s.focal_rel_err for s in samples]),
        "up_deg": np.degrees([s.up_field_err for s in samples]),
        "lat_deg": np.degrees([s.lat_field_err for s in samples]),
    }
    stats = {}
    for name, values in arr.items():
        if name == "focal_rel":
            stats[name] = _stats(values, FOCAL_AUC_THRESHOLDS, rel_labels)
        else:
            stats[name] = _stats(values, ANGULAR_AUC_THRESHOLDS_DEG, ang_labels)
    return MetricReport(stats=stats, count=len(samples))
