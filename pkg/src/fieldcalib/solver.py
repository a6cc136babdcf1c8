"""Levenberg-Marquardt recovery of camera intrinsics and per-view gravity
from observed perspective fields.

In shared mode the focal length (as log f) and the distortion parameter are
global variables across all views while each view keeps its own gravity,
updated through a tangent-plane retraction on the unit sphere and
re-anchored after every accepted step.  Per-view gravity blocks are
eliminated by a Schur complement, and every cross-view reduction uses
``math.fsum``, so the result is bitwise equivariant under permutations of
the input views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .camera import (
    CameraIntrinsics,
    CameraModel,
    K1_BOUNDS,
    XI_BOUNDS,
    make_from_vfov,
)
from .fields import (
    GridSpec,
    PerspectiveField,
    field_jacobian,
    field_residual,
    n_intrinsic_params,
)
from .gravity import GravityState, angles_from_gravity, gravity_from_angles, tangent_update

__all__ = [
    "SolveConfig",
    "IterationRecord",
    "CalibrationEstimate",
    "initialize",
    "solve",
    "eq2_objective",
    "diag_report",
]

_MIN_VALID_SAMPLES = 16
_LAMBDA_MAX = 1e12
_DIAG_FLOOR = 1e-12

# Starting vertical FoVs probed by the coarse scan before LM, per model.
_SCAN_VFOVS = {
    CameraModel.PINHOLE: (25.0, 40.0, 55.0, 70.0, 85.0, 100.0),
    CameraModel.SIMPLE_RADIAL: (25.0, 40.0, 55.0, 70.0, 85.0, 100.0),
    CameraModel.UCM: (40.0, 60.0, 80.0, 105.0, 130.0, 155.0, 175.0),
}


@dataclass(frozen=True)
class SolveConfig:
    """Solver knobs; defaults give a reproducible damped-LM schedule."""

    model: CameraModel = CameraModel.PINHOLE
    shared_intrinsics: bool = True
    max_iters: int = 100
    lambda_init: float = 1e-2
    lambda_decrease: float = 0.3
    lambda_increase: float = 5.0
    step_tol: float = 1e-8
    cost_tol: float = 1e-10
    init_vfov_deg: float = 55.0
    huber_delta: Optional[float] = None
    init_fov_scan: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        for name in ("lambda_init", "step_tol", "cost_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lambda_decrease < 1:
            raise ValueError("lambda_decrease must lie in (0, 1)")
        if self.lambda_increase <= 1:
            raise ValueError("lambda_increase must exceed 1")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive when set")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    lam: float
    cost_before: float
    cost_trial: float
    accepted: bool
    step_norm: float


@dataclass
class CalibrationEstimate:
    """Solution of a calibration solve.

    ``intrinsics`` is a single camera in shared (or single-view) mode and a
    per-view list in independent mode with more than one view.
    """

    intrinsics: Union[CameraIntrinsics, List[CameraIntrinsics]]
    gravities: List[GravityState]
    final_cost: float
    iterations: int
    converged: bool
    per_view_rms: List[float]
    trace: List[IterationRecord] = dataclass_field(default_factory=list)
    message: str = ""
    sub_estimates: Optional[List["CalibrationEstimate"]] = None

    @property
    def shared_intrinsics(self) -> bool:
        return isinstance(self.intrinsics, CameraIntrinsics)

    def intrinsics_for_view(self, i: int) -> CameraIntrinsics:
        if isinstance(self.intrinsics, CameraIntrinsics):
            return self.intrinsics
        return self.intrinsics[i]


def _coarse_gravity(field: PerspectiveField) -> GravityState:
    """Closed-form gravity guess from the central quarter of a field.

    The center latitude pins the zenith component along the optical axis;
    the mean up vector gives the transverse direction.
    """
    h, w = field.height, field.width
    r0, r1 = h // 4, h - h // 4
    c0, c1 = w // 4, w - w // 4
    sub_valid = field.valid[r0:r1, c0:c1]
    if not np.any(sub_valid):
        raise ValueError("no valid samples in the central region")
    lat = field.latitude[r0:r1, c0:c1][sub_valid]
    up = field.up[r0:r1, c0:c1][sub_valid]
    if field.confidence is not None:
        wgt = field.confidence[r0:r1, c0:c1][sub_valid]
    else:
        wgt = np.ones(lat.shape[0])
    wsum = float(wgt.sum())
    if wsum <= 0:
        raise ValueError("central region carries zero total confidence")
    mean_lat = float(np.dot(wgt, lat) / wsum)
    mean_up = (wgt[:, None] * up).sum(axis=0) / wsum
    nrm = float(np.linalg.norm(mean_up))
    if nrm < 1e-8:
        raise ValueError("mean up vector is degenerate; roll is undefined")
    gz = math.sin(max(-1.0, min(1.0, mean_lat)))
    t = math.sqrt(max(0.0, 1.0 - gz * gz))
    g = np.array([t * mean_up[0] / nrm, t * mean_up[1] / nrm, gz])
    roll, pitch = angles_from_gravity(g / np.linalg.norm(g))
    return gravity_from_angles(roll, pitch)


def _init_distortion(model: CameraModel) -> Optional[float]:
    if model is CameraModel.PINHOLE:
        return None
    return 1.0 if model is CameraModel.UCM else 0.0


def initialize(fields: Sequence[PerspectiveField], model: CameraModel,
               image_size: Optional[Tuple[int, int]] = None,
               init_vfov_deg: float = 55.0) -> Tuple[CameraIntrinsics, List[GravityState]]:
    """Initial parameters: focal from a nominal vFoV, zero-ish distortion,
    and a closed-form per-view gravity from the field centers."""
    if not fields:
        raise ValueError("at least one field is required")
    for f in fields:
        if f.n_valid < _MIN_VALID_SAMPLES:
            raise ValueError(f"field has fewer than {_MIN_VALID_SAMPLES} valid samples")
    w, h = image_size if image_size is not None else (fields[0].width, fields[0].height)
    cam = make_from_vfov(model, w, h, init_vfov_deg, _init_distortion(model))
    gravities = [_coarse_gravity(f) for f in fields]
    return cam, gravities


def _component_cost(r: np.ndarray, w: np.ndarray, huber_delta: Optional[float]) -> float:
    if huber_delta is None:
        return float(np.dot(w * r, r))
    a = np.abs(r)
    rho = np.where(a <= huber_delta, r * r, huber_delta * (2.0 * a - huber_delta))
    return float(np.dot(w, rho))


def _irls_weights(r: np.ndarray, w: np.ndarray, huber_delta: Optional[float]) -> np.ndarray:
    if huber_delta is None:
        return w
    a = np.abs(r)
    return w * np.where(a <= huber_delta, 1.0, huber_delta / np.maximum(a, 1e-300))


def _fsum_blocks(blocks: List[np.ndarray]) -> np.ndarray:
    """Elementwise fsum of equally shaped small arrays (order independent)."""
    out = np.empty(blocks[0].shape)
    flat = [b.reshape(-1) for b in blocks]
    for j in range(flat[0].shape[0]):
        out.reshape(-1)[j] = math.fsum(float(b[j]) for b in flat)
    return out


def _solve_small(A: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    """Closed-form solve for 1x1 / 2x2 systems; None when singular."""
    if A.shape == (1, 1):
        if abs(A[0, 0]) < 1e-300:
            return None
        return np.array([b[0] / A[0, 0]])
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    scale = max(abs(A[0, 0]), abs(A[1, 1]), 1e-300)
    if abs(det) < 1e-14 * scale * scale:
        return None
    return np.array([
        (b[0] * A[1, 1] - b[1] * A[0, 1]) / det,
        (A[0, 0] * b[1] - A[1, 0] * b[0]) / det,
    ])


def _inv2(A: np.ndarray) -> Optional[np.ndarray]:
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    scale = max(abs(A[0, 0]), abs(A[1, 1]), 1e-300)
    if abs(det) < 1e-14 * scale * scale:
        return None
    return np.array([[A[1, 1], -A[0, 1]], [-A[1, 0], A[0, 0]]]) / det


def _clamp_distortion(model: CameraModel, d: float) -> float:
    lo, hi = K1_BOUNDS if model is CameraModel.SIMPLE_RADIAL else XI_BOUNDS
    return min(max(d, lo), hi)


class _SharedProblem:
    """Residual/Jacobian bookkeeping for one shared-intrinsics solve."""

    def __init__(self, fields: Sequence[PerspectiveField], cfg: SolveConfig,
                 image_size: Tuple[int, int]):
        self.fields = list(fields)
        self.cfg = cfg
        w, h = image_size
        stride_x = w / fields[0].width
        stride_y = h / fields[0].height
        if (abs(stride_x - round(stride_x)) > 1e-9 or round(stride_x) != round(stride_y)
                or round(stride_x) < 1):
            raise ValueError("fields do not tile the image with a uniform integer stride")
        self.grid = GridSpec(stride=int(round(stride_x)))
        self.image_size = image_size

    def residuals(self, cam: CameraIntrinsics, gravities: Sequence[GravityState]):
        out = []
        for f, g in zip(self.fields, gravities):
            r, w = field_residual(f, cam, g, grid=self.grid, clamp_invalid=True)
            out.append((r, w))
        return out

    def cost(self, res) -> float:
        return math.fsum(_component_cost(r, w, self.cfg.huber_delta) for r, w in res)

    def jacobians(self, cam: CameraIntrinsics, gravities: Sequence[GravityState]):
        return [
            field_jacobian(cam, g, grid=self.grid, observed=f, clamp_invalid=True)
            for f, g in zip(self.fields, gravities)
        ]


def _lm_shared(fields: Sequence[PerspectiveField], cfg: SolveConfig,
               cam: CameraIntrinsics, gravities: List[GravityState],
               image_size: Tuple[int, int]) -> CalibrationEstimate:
    prob = _SharedProblem(fields, cfg, image_size)
    n_int = n_intrinsic_params(cfg.model)
    n_views = len(fields)

    res = prob.residuals(cam, gravities)
    cost = prob.cost(res)
    if not math.isfinite(cost):
        return _finish(cam, gravities, res, cost, 0, False, [], "non-finite initial residuals", cfg)

    lam = cfg.lambda_init
    trace: List[IterationRecord] = []
    converged = False
    message = ""
    iteration = 0
    jacs = prob.jacobians(cam, gravities)

    while iteration < cfg.max_iters:
        # per-view normal-equation blocks with IRLS weights
        A_blocks, C_blocks, B_blocks, a_vecs, b_vecs = [], [], [], [], []
        for (r, w), J in zip(res, jacs):
            wr = _irls_weights(r, w, cfg.huber_delta)
            Ji = J[:, :n_int]
            Jd = J[:, n_int:]
            WJi = wr[:, None] * Ji
            A_blocks.append(Ji.T @ WJi)
            C_blocks.append(WJi.T @ Jd)
            B_blocks.append(Jd.T @ (wr[:, None] * Jd))
            a_vecs.append(Ji.T @ (wr * r))
            b_vecs.append(Jd.T @ (wr * r))
        H_int = _fsum_blocks(A_blocks)
        g_int = _fsum_blocks(a_vecs)

        accepted = False
        while iteration < cfg.max_iters:
            iteration += 1
            H_d = H_int + lam * np.diag(np.maximum(np.diag(H_int), _DIAG_FLOOR))
            Binv, corr_S, corr_rhs = [], [], []
            singular = False
            for C, B, b in zip(C_blocks, B_blocks, b_vecs):
                Bd = B + lam * np.diag(np.maximum(np.diag(B), _DIAG_FLOOR))
                Bi = _inv2(Bd)
                if Bi is None:
                    singular = True
                    break
                Binv.append(Bi)
                corr_S.append(C @ Bi @ C.T)
                corr_rhs.append(C @ (Bi @ b))
            if singular:
                step = None
            else:
                S = H_d - _fsum_blocks(corr_S)
                rhs = -g_int + _fsum_blocks(corr_rhs)
                d_int = _solve_small(S, rhs)
                if d_int is None:
                    step = None
                else:
                    d_deltas = [
                        Bi @ (-b - C.T @ d_int)
                        for Bi, C, b in zip(Binv, C_blocks, b_vecs)
                    ]
                    step = (d_int, d_deltas)

            if step is None:
                lam *= cfg.lambda_increase
                trace.append(IterationRecord(iteration, lam, cost, math.inf, False, math.nan))
                if lam > _LAMBDA_MAX:
                    message = "normal equations singular at maximal damping"
                    break
                continue

            d_int, d_deltas = step
            step_norm = math.sqrt(
                float(np.dot(d_int, d_int))
                + math.fsum(float(np.dot(d, d)) for d in d_deltas)
            )

            trial_f = math.exp(math.log(cam.f) + d_int[0])
            trial_d = None
            if n_int == 2:
                trial_d = _clamp_distortion(cfg.model, float(cam.distortion) + d_int[1])
            trial_cam = cam.with_params(f=trial_f, distortion=trial_d)
            trial_grav = [tangent_update(g, d) for g, d in zip(gravities, d_deltas)]
            trial_res = prob.residuals(trial_cam, trial_grav)
            trial_cost = prob.cost(trial_res)

            improved = math.isfinite(trial_cost) and trial_cost < cost
            trace.append(IterationRecord(iteration, lam, cost, trial_cost, improved, step_norm))

            if improved:
                decrease = cost - trial_cost
                cam, gravities, res, cost = trial_cam, trial_grav, trial_res, trial_cost
                lam = max(lam * cfg.lambda_decrease, 1e-14)
                accepted = True
                if step_norm <= cfg.step_tol or decrease <= cfg.cost_tol * max(cost, 1e-300):
                    converged = True
                break
            lam *= cfg.lambda_increase
            if step_norm <= cfg.step_tol:
                # damping can only grow from here, so no visible progress is possible
                converged = True
                break
            if lam > _LAMBDA_MAX:
                message = "no acceptable step at maximal damping"
                break

        if converged or not accepted:
            break
        jacs = prob.jacobians(cam, gravities)

    return _finish(cam, gravities, res, cost, iteration, converged, trace, message, cfg)


def _finish(cam, gravities, res, cost, iterations, converged, trace, message,
            cfg) -> CalibrationEstimate:
    rms = []
    for r, w in res:
        wsum = float(w.sum())
        rms.append(math.sqrt(float(np.dot(w * r, r)) / wsum) if wsum > 0 else math.inf)
    return CalibrationEstimate(
        intrinsics=cam,
        gravities=list(gravities),
        final_cost=cost,
        iterations=iterations,
        converged=converged,
        per_view_rms=rms,
        trace=trace,
        message=message,
    )


def _scan_init(fields: Sequence[PerspectiveField], cfg: SolveConfig,
               gravities: List[GravityState],
               image_size: Tuple[int, int]) -> CameraIntrinsics:
    """Pick the starting focal by probing a fixed ladder of vertical FoVs."""
    prob = _SharedProblem(fields, cfg, image_size)
    w, h = image_size
    candidates = list(_SCAN_VFOVS[cfg.model])
    if cfg.init_vfov_deg not in candidates:
        candidates.insert(0, cfg.init_vfov_deg)
    best_cam, best_cost = None, math.inf
    for vf in candidates:
        try:
            cam = make_from_vfov(cfg.model, w, h, vf, _init_distortion(cfg.model))
        except ValueError:
            continue
        c = prob.cost(prob.residuals(cam, gravities))
        if c < best_cost:
            best_cam, best_cost = cam, c
    if best_cam is None:
        raise ValueError("no feasible starting focal length")
    return best_cam


def solve(fields: Sequence[PerspectiveField], cfg: SolveConfig,
          image_size: Optional[Tuple[int, int]] = None) -> CalibrationEstimate:
    """Recover intrinsics and per-view gravity from observed fields.

    With ``cfg.shared_intrinsics`` the intrinsics are one global unknown
    across all views; otherwise each view is solved independently and the
    estimate carries one intrinsics record per view.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("at least one field is required")
    dims = {(f.width, f.height) for f in fields}
    if len(dims) != 1:
        raise ValueError("all fields must share grid dimensions")
    if image_size is None:
        image_size = (fields[0].width, fields[0].height)

    if not cfg.shared_intrinsics and len(fields) > 1:
        subs = [solve([f], cfg, image_size=image_size) for f in fields]
        return CalibrationEstimate(
            intrinsics=[s.intrinsics for s in subs],
            gravities=[s.gravities[0] for s in subs],
            final_cost=math.fsum(s.final_cost for s in subs),
            iterations=max(s.iterations for s in subs),
            converged=all(s.converged for s in subs),
            per_view_rms=[s.per_view_rms[0] for s in subs],
            trace=[],
            message="independent per-view solves",
            sub_estimates=subs,
        )

    cam, gravities = initialize(fields, cfg.model, image_size=image_size,
                                init_vfov_deg=cfg.init_vfov_deg)
    if cfg.init_fov_scan:
        cam = _scan_init(fields, cfg, gravities, image_size)
    return _lm_shared(fields, cfg, cam, gravities, image_size)


def eq2_objective(fields_pred: Sequence[PerspectiveField],
                  fields_gt: Sequence[PerspectiveField],
                  gamma: float, alpha: float) -> float:
    """Confidence-weighted dense field objective.

    Per valid sample: gamma * sigma * ||y - y_hat||^2 - alpha * log(sigma),
    with y the stacked (up, latitude) components and sigma the predicted
    confidence (1 where absent).  Summed over views and samples.
    """
    if len(fields_pred) != len(fields_gt):
        raise ValueError("prediction / ground-truth view counts differ")
    parts = []
    for fp, fg in zip(fields_pred, fields_gt):
        if (fp.width, fp.height) != (fg.width, fg.height):
            raise ValueError("field grids do not match")
        mask = fp.valid & fg.valid
        if not np.any(mask):
            continue
        sigma = fp.confidence[mask] if fp.confidence is not None else np.ones(int(mask.sum()))
        if np.any(sigma <= 0):
            raise ValueError("confidence must be positive on valid samples")
        du = fp.up[mask] - fg.up[mask]
        dl = fp.latitude[mask] - fg.latitude[mask]
        sq = np.einsum("ij,ij->i", du, du) + dl * dl
        parts.append(float(np.sum(gamma * sigma * sq - alpha * np.log(sigma))))
    return math.fsum(parts)


def diag_report(estimate: CalibrationEstimate) -> dict:
    """Deterministic solver diagnostics: cost trace, step outcomes, RMS."""
    accepted = [t for t in estimate.trace if t.accepted]
    cost_trace = []
    if estimate.trace:
        cost_trace.append(estimate.trace[0].cost_before)
        cost_trace.extend(t.cost_trial for t in accepted)
    else:
        cost_trace.append(estimate.final_cost)
    return {
        "iterations": estimate.iterations,
        "converged": estimate.converged,
        "final_cost": estimate.final_cost,
        "per_view_rms": list(estimate.per_view_rms),
        "accepted_steps": len(accepted),
        "rejected_steps": len(estimate.trace) - len(accepted),
        "cost_trace": cost_trace,
        "message": estimate.message,
        "steps": [
            {
                "iteration": t.iteration,
                "lambda": t.lam,
                "cost_before": t.cost_before,
                "cost_trial": t.cost_trial,
                "accepted": t.accepted,
                "step_norm": t.step_norm,
            }
            for t in estimate.trace
        ],
    }
