"""Monte-Carlo harness for the views-vs-error study: noisy fields in, both
optimizer modes out, aggregated per view count.

Each trial samples one camera and one gravity per view, renders clean
fields, perturbs them with inverse-variance-weighted noise, and solves the
first N views in shared and independent mode for every requested N.  RNG
streams derive from (seed, trial), so results are reproducible and
independent of trial execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics, CameraModel, make_from_vfov, vfov
from .datagen import add_field_noise
from .fields import GridSpec, render_fields
from .gravity import GravityState
from .solver import SolveConfig, solve

__all__ = ["StudySpec", "StudyRow", "run_views_study", "sample_tilted_gravity"]


def sample_tilted_gravity(rng: np.random.Generator, max_tilt_deg: float = 45.0) -> GravityState:
    """Gravity of a roughly upright camera: tilt the upright zenith
    (0, -1, 0) by a uniform angle about a random axis."""
    ang = math.radians(rng.uniform(0.0, max_tilt_deg))
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    K = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    R = np.eye(3) + math.sin(ang) * K + (1.0 - math.cos(ang)) * (K @ K)
    return GravityState(R @ np.array([0.0, -1.0, 0.0]))


@dataclass(frozen=True)
class StudySpec:
    model: CameraModel = CameraModel.PINHOLE
    trials: int = 50
    view_counts: Tuple[int, ...] = (1, 2, 4, 8)
    up_sigma_deg: float = 5.0
    lat_sigma_deg: float = 3.0
    seed: int = 0
    image_size: int = 128
    grid_stride: int = 4
    vfov_range: Tuple[float, float] = (30.0, 95.0)
    max_tilt_deg: float = 45.0
    max_iters: int = 60

    def __post_init__(self):
        if self.trials < 10:
            raise ValueError("at least 10 trials are required")
        if not self.view_counts:
            raise ValueError("view_counts must be non-empty")


@dataclass(frozen=True)
class StudyRow:
    n_views: int
    mode: str  # "shared" | "independent"
    median_focal_rel: float
    mean_focal_rel: float
    median_vfov_err: float
    mean_vfov_err: float


def _trial_camera(spec: StudySpec, rng: np.random.Generator) -> CameraIntrinsics:
    vf = rng.uniform(*spec.vfov_range)
    if spec.model is CameraModel.PINHOLE:
        return make_from_vfov(spec.model, spec.image_size, spec.image_size, vf)
    if spec.model is CameraModel.SIMPLE_RADIAL:
        r = math.tan(math.radians(vf) / 2.0)
        while True:
            k1 = rng.normal(0.0, 0.2)
            if abs(k1) <= 0.6 and 1.0 + 3.0 * k1 * r * r > 0.02:
                break
        return make_from_vfov(spec.model, spec.image_size, spec.image_size, vf, k1)
    xi = rng.uniform(0.6, 2.0)
    vf_ucm = rng.uniform(105.0, 175.0)
    return make_from_vfov(spec.model, spec.image_size, spec.image_size, vf_ucm, xi)


def run_views_study(spec: StudySpec) -> Tuple[List[StudyRow], Dict]:
    """Run the study; returns ordered rows plus the raw per-trial errors."""
    n_max = max(spec.view_counts)
    grid = GridSpec(spec.grid_stride)
    shared_err: Dict[int, List[float]] = {n: [] for n in spec.view_counts}
    indep_err: Dict[int, List[float]] = {n: [] for n in spec.view_counts}
    shared_vfov: Dict[int, List[float]] = {n: [] for n in spec.view_counts}
    indep_vfov: Dict[int, List[float]] = {n: [] for n in spec.view_counts}

    for trial in range(spec.trials):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed,
                                                           spawn_key=(trial,)))
        cam = _trial_camera(spec, rng)
        gravities = [sample_tilted_gravity(rng, spec.max_tilt_deg) for _ in range(n_max)]
        noisy = [
            add_field_noise(render_fields(cam, g, grid), spec.up_sigma_deg,
                            spec.lat_sigma_deg, rng)
            for g in gravities
        ]
        vf_gt = vfov(cam)
        size = (spec.image_size, spec.image_size)
        for n in spec.view_counts:
            cfg_s = SolveConfig(model=spec.model, shared_intrinsics=True,
                                max_iters=spec.max_iters)
            est_s = solve(noisy[:n], cfg_s, image_size=size)
            shared_err[n].append(abs(est_s.intrinsics.f - cam.f) / cam.f)
            shared_vfov[n].append(abs(vfov(est_s.intrinsics) - vf_gt))

            cfg_i = SolveConfig(model=spec.model, shared_intrinsics=False,
                                max_iters=spec.max_iters)
            est_i = solve(noisy[:n], cfg_i, image_size=size)
            cams = est_i.intrinsics if isinstance(est_i.intrinsics, list) else [est_i.intrinsics]
            indep_err[n].append(float(np.mean([abs(c.f - cam.f) / cam.f for c in cams])))
            indep_vfov[n].append(float(np.mean([abs(vfov(c) - vf_gt) for c in cams])))

    rows = []
    for n in spec.view_counts:
        rows.append(StudyRow(n, "shared",
                             float(np.median(shared_err[n])), float(np.mean(shared_err[n])),
                             float(np.median(shared_vfov[n])), float(np.mean(shared_vfov[n]))))
        rows.append(StudyRow(n, "independent",
                             float(np.median(indep_err[n])), float(np.mean(indep_err[n])),
                             float(np.median(indep_vfov[n])), float(np.mean(indep_vfov[n]))))
    raw = {
        "shared_focal_rel": shared_err,
        "independent_focal_rel": indep_err,
        "shared_vfov_err": shared_vfov,
        "independent_vfov_err": indep_vfov,
    }
    return rows, raw


def rows_to_csv(rows: Sequence[StudyRow]) -> str:
    lines = ["n_views,mode,median_focal_rel,mean_focal_rel,median_vfov_err_deg,mean_vfov_err_deg"]
    for r in rows:
        lines.append(
            f"{r.n_views},{r.mode},{r.median_focal_rel!r},{r.mean_focal_rel!r},"
            f"{r.median_vfov_err!r},{r.mean_vfov_err!r}"
        )
    return "\n".join(lines) + "\n"
