"""Synthetic dataset construction from gravity-aligned equirectangular
panoramas: camera sampling, perspective reprojection with dense ground-truth
annotation, trajectory matching and rotation augmentation, and synthetic
field noise for exercising the confidence-weighted solver.

World frame: +Z is up.  Panorama pixels map to (longitude in [-pi, pi),
colatitude in [0, pi]) with longitude = atan2(y, x) and colatitude measured
from +Z; row 0 is the zenith.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .camera import CameraIntrinsics, CameraModel, make_from_hfov, make_from_vfov, unproject
from .fields import GridSpec, PerspectiveField, default_grid, grid_pixel_centers, render_fields
from .gravity import GravityState, gravity_from_world_pose

__all__ = [
    "EquirectImage",
    "Trajectory",
    "SimilarityTransform",
    "ClipSpec",
    "DatasetManifest",
    "sample_camera",
    "pano_coords_from_dir",
    "dir_from_pano_coords",
    "reproject",
    "reproject_coords",
    "gt_annotation",
    "umeyama_align",
    "match_trajectories",
    "sample_rotation_offset",
    "apply_rotation_offsets",
    "augment_rotations",
    "add_field_noise",
    "generate_clip",
]

WORLD_UP = np.array([0.0, 0.0, 1.0])

# Camera sampling ranges: UCM/pinhole/simple-radial mix and category boxes.
MODEL_MIX = {CameraModel.UCM: 0.5, CameraModel.PINHOLE: 0.25, CameraModel.SIMPLE_RADIAL: 0.25}
UCM_CATEGORIES = (
    ("wide", (105.0, 140.0), (0.5, 0.95)),
    ("fisheye", (140.0, 180.0), (1.05, 2.0)),
    ("extreme", (160.0, 200.0), (1.5, 2.3)),
)
PINHOLE_VFOV_RANGE = (20.0, 105.0)
K1_SIGMA = 0.2
K1_TRUNC = 0.6


@dataclass
class EquirectImage:
    """Gravity-aligned 2:1 equirectangular panorama."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"panorama must be (H, W, 3), got {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        if w != 2 * h:
            raise ValueError(f"equirectangular width must be 2x height, got {w}x{h}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Trajectory:
    """Ordered camera poses: times, world-to-camera quaternions (w, x, y, z),
    and translations in meters."""

    times: np.ndarray
    quats_wxyz: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.quats_wxyz = np.asarray(self.quats_wxyz, dtype=float)
        self.translations = np.asarray(self.translations, dtype=float)
        n = self.times.shape[0]
        if self.quats_wxyz.shape != (n, 4) or self.translations.shape != (n, 3):
            raise ValueError("trajectory arrays have inconsistent shapes")
        if n >= 2 and not np.all(np.diff(self.times) > 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(self.quats_wxyz, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternions must be unit norm")
        self.quats_wxyz = self.quats_wxyz / norms[:, None]

    def __len__(self) -> int:
        return int(self.times.shape[0])

    def rotation(self, i: int) -> np.ndarray:
        """World-to-camera rotation matrix of pose i."""
        w, x, y, z = self.quats_wxyz[i]
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def resampled(self, count: int) -> "Trajectory":
        """Uniformly resample to ``count`` poses over the same time span
        (linear translation interpolation, quaternion slerp)."""
        if len(self) < 2:
            raise ValueError("resampling requires at least 2 poses")
        if count < 2:
            raise ValueError("resample count must be >= 2")
        new_t = np.linspace(self.times[0], self.times[-1], count)
        trans = np.stack([
            np.interp(new_t, self.times, self.translations[:, k]) for k in range(3)
        ], axis=1)
        rots = Rotation.from_quat(self.quats_wxyz[:, [1, 2, 3, 0]])
        slerp = Slerp(self.times, rots)
        q_xyzw = slerp(new_t).as_quat()
        return Trajectory(new_t, q_xyzw[:, [3, 0, 1, 2]], trans)


@dataclass(frozen=True)
class SimilarityTransform:
    """dst ~= s * R @ src + t."""

    s: float
    R: np.ndarray
    t: np.ndarray
    rmse: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(pts, dtype=float) @ self.R.T) + self.t


@dataclass(frozen=True)
class ClipSpec:
    """Output parameters for one generated clip."""

    out_dir: Path
    clip_id: str
    pano_id: str = ""
    frame_count: int = 81
    fps: float = 16.0
    width: int = 640
    height: int = 640
    field_stride: Optional[int] = None
    seed: int = 0


@dataclass
class DatasetManifest:
    clip_id: str
    pano_id: str
    camera: dict
    fps: float
    frame_count: int
    width: int
    height: int
    seed: int
    frames: List[dict] = dataclass_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "pano_id": self.pano_id,
            "camera": self.camera,
            "fps": self.fps,
            "frame_count": self.frame_count,
            "resolution": [self.width, self.height],
            "seed": self.seed,
            "frames": self.frames,
        }


def _sample_k1(rng: np.random.Generator, vfov_deg: float) -> float:
    """Truncated-normal k1 draw, rejected until the camera can invert its
    vertical edge rays (radial fold-over margin 0.02)."""
    r = math.tan(math.radians(vfov_deg) / 2.0)
    for _ in range(10000):
        k1 = rng.normal(0.0, K1_SIGMA)
        if abs(k1) > K1_TRUNC:
            continue
        if 1.0 + 3.0 * k1 * r * r > 0.02:
            return float(k1)
    raise RuntimeError("k1 sampling failed to find a representable value")


def sample_camera(rng: np.random.Generator, width: int = 640, height: int = 640) -> CameraIntrinsics:
    """Draw a camera: UCM with probability 0.5 (category-boxed horizontal
    FoV and xi), otherwise pinhole or simple-radial with uniform vertical
    FoV in [20, 105] degrees and truncated-normal k1."""
    u = rng.random()
    if u < MODEL_MIX[CameraModel.UCM]:
        idx = int(rng.integers(len(UCM_CATEGORIES)))
        _, (fov_lo, fov_hi), (xi_lo, xi_hi) = UCM_CATEGORIES[idx]
        xfov = rng.uniform(fov_lo, fov_hi)
        xi = rng.uniform(xi_lo, xi_hi)
        return make_from_hfov(CameraModel.UCM, width, height, xfov, xi)
    vfov_deg = rng.uniform(*PINHOLE_VFOV_RANGE)
    if u < MODEL_MIX[CameraModel.UCM] + MODEL_MIX[CameraModel.PINHOLE]:
        return make_from_vfov(CameraModel.PINHOLE, width, height, vfov_deg)
    k1 = _sample_k1(rng, vfov_deg)
    return make_from_vfov(CameraModel.SIMPLE_RADIAL, width, height, vfov_deg, k1)


def pano_coords_from_dir(dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(longitude, colatitude) of world direction vectors (need not be unit)."""
    d = np.asarray(dirs, dtype=float)
    n = np.linalg.norm(d, axis=-1)
    z = np.divide(d[..., 2], n, out=np.zeros_like(n), where=n > 0)
    colat = np.arccos(np.clip(z, -1.0, 1.0))
    lam = np.arctan2(d[..., 1], d[..., 0])
    lam = np.where(lam >= math.pi, lam - 2 * math.pi, lam)
    return lam, colat


def dir_from_pano_coords(lam: np.ndarray, colat: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    colat = np.asarray(colat, dtype=float)
    s = np.sin(colat)
    return np.stack([s * np.cos(lam), s * np.sin(lam), np.cos(colat)], axis=-1)


def _bilinear_sample(pano: EquirectImage, lam: np.ndarray, colat: np.ndarray) -> np.ndarray:
    """Bilinear panorama lookup with longitude wraparound and colatitude clamp."""
    h, w = pano.height, pano.width
    img = pano.pixels.astype(float)
    u = (lam + math.pi) / (2 * math.pi) * w - 0.5
    v = colat / math.pi * h - 0.5
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    a = u - u0
    b = v - v0
    u0w = np.mod(u0, w)
    u1w = np.mod(u0 + 1, w)
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    out = (
        (1 - a)[..., None] * (1 - b)[..., None] * img[v0c, u0w]
        + a[..., None] * (1 - b)[..., None] * img[v0c, u1w]
        + (1 - a)[..., None] * b[..., None] * img[v1c, u0w]
        + a[..., None] * b[..., None] * img[v1c, u1w]
    )
    return out


def reproject_coords(cam: CameraIntrinsics, R: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Panorama coordinates sampled by every output pixel.

    Returns (longitude, colatitude, valid), each (height, width).
    """
    pix = grid_pixel_centers(cam.width, cam.height, GridSpec(1))
    rays, ok = unproject(cam, pix.reshape(-1, 2))
    R = np.asarray(R, dtype=float)
    world = np.where(ok[:, None], rays, 0.0) @ R  # R.T @ ray, batched
    lam, colat = pano_coords_from_dir(world)
    h, w = cam.height, cam.width
    return lam.reshape(h, w), colat.reshape(h, w), ok.reshape(h, w)


def reproject(pano: EquirectImage, R: np.ndarray, cam: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Render the panorama through a camera at world-to-camera rotation R.

    Returns (image (H, W, 3) uint8, valid (H, W)); invalid pixels are black.
    """
    lam, colat, ok = reproject_coords(cam, R)
    out = _bilinear_sample(pano, lam, colat)
    out = np.where(ok[..., None], out, 0.0)
    return np.clip(np.round(out), 0, 255).astype(np.uint8), ok


def gt_annotation(cam: CameraIntrinsics, R: np.ndarray,
                  grid: Optional[GridSpec] = None) -> Tuple[GravityState, PerspectiveField]:
    """Ground-truth gravity and perspective field for a posed camera."""
    g = gravity_from_world_pose(R, WORLD_UP)
    return g, render_fields(cam, g, grid if grid is not None else default_grid(cam))


def umeyama_align(src, dst, mode: str = "full") -> SimilarityTransform:
    """Least-squares similarity transform from src to dst points.

    ``full`` is the classical closed-form solution; ``yaw_scale`` constrains
    the rotation to the world +Z axis (angle from the planar cross/dot sums)
    as used for trajectory matching.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must be matching (N, 3) arrays")
    n = src.shape[0]
    if n < 3:
        raise ValueError("at least 3 points are required")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    p = src - mu_s
    q = dst - mu_d
    var_s = float(np.einsum("ij,ij->", p, p)) / n
    if var_s <= 0:
        raise ValueError("degenerate source points (zero variance)")

    if mode == "full":
        cov = q.T @ p / n
        U, D, Vt = np.linalg.svd(cov)
        S = np.eye(3)
        if np.linalg.matrix_rank(cov) < 2:
            raise ValueError("degenerate configuration for full Umeyama (rank < 2)")
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        R = U @ S @ Vt
        s = float((D * np.diag(S)).sum()) / var_s
    elif mode == "yaw_scale":
        A = float(np.dot(q[:, 0], p[:, 0]) + np.dot(q[:, 1], p[:, 1]))
        B = float(np.dot(q[:, 1], p[:, 0]) - np.dot(q[:, 0], p[:, 1]))
        C = float(np.dot(q[:, 2], p[:, 2]))
        planar = math.hypot(A, B)
        if planar < 1e-12 * max(var_s, 1.0):
            raise ValueError("degenerate configuration for yaw_scale Umeyama")
        theta = math.atan2(B, A)
        c, si = math.cos(theta), math.sin(theta)
        R = np.array([[c, -si, 0.0], [si, c, 0.0], [0.0, 0.0, 1.0]])
        s = (planar + C) / (n * var_s)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if s <= 0:
        raise ValueError("degenerate configuration: non-positive scale")
    t = mu_d - s * R @ mu_s
    resid = dst - (s * (src @ R.T) + t)
    rmse = math.sqrt(float(np.einsum("ij,ij->", resid, resid)) / n)
    return SimilarityTransform(s=float(s), R=R, t=t, rmse=rmse)


def match_trajectories(candidates: Sequence[Trajectory], target: Trajectory,
                       k: int) -> List[Tuple[int, SimilarityTransform]]:
    """Top-k candidates by yaw_scale alignment RMSE of translations against
    the target, ties broken by candidate index."""
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    scored = []
    for i, cand in enumerate(candidates):
        res = cand.resampled(len(target)) if len(cand) != len(target) else cand
        tf = umeyama_align(res.translations, target.translations, mode="yaw_scale")
        scored.append((tf.rmse, i, tf))
    scored.sort(key=lambda item: (item[0], item[1]))
    return [(i, tf) for _, i, tf in scored[:k]]


def sample_rotation_offset(rng: np.random.Generator) -> Rotation:
    """One augmentation rotation: yaw uniform to +-180 deg about world +Z,
    pitch and roll uniform to +-45 deg."""
    yaw = rng.uniform(-180.0, 180.0)
    pitch = rng.uniform(-45.0, 45.0)
    roll = rng.uniform(-45.0, 45.0)
    return Rotation.from_euler("ZYX", [yaw, pitch, roll], degrees=True)


def apply_rotation_offsets(traj: Trajectory, offsets: Sequence[Rotation]) -> Trajectory:
    """Pre-compose a per-frame world-side rotation offset with every pose."""
    if len(offsets) != len(traj):
        raise ValueError("need one offset per pose")
    rots = Rotation.from_quat(traj.quats_wxyz[:, [1, 2, 3, 0]])
    new_q = []
    for i in range(len(traj)):
        new_q.append((rots[i] * offsets[i]).as_quat())
    q = np.asarray(new_q)
    return Trajectory(traj.times.copy(), q[:, [3, 0, 1, 2]], traj.translations.copy())


def augment_rotations(traj: Trajectory, rng: np.random.Generator) -> List[Trajectory]:
    """Two rotation-augmented copies of a trajectory.

    Variant A applies one constant sampled offset to every pose; variant B
    interpolates between two sampled offsets by normalized frame index.
    Offsets are drawn in the order (A, B-start, B-end).
    """
    if len(traj) < 2:
        raise ValueError("augmentation requires at least 2 poses")
    off_a = sample_rotation_offset(rng)
    off_b0 = sample_rotation_offset(rng)
    off_b1 = sample_rotation_offset(rng)
    n = len(traj)
    var_a = apply_rotation_offsets(traj, [off_a] * n)
    slerp = Slerp([0.0, 1.0], Rotation.concatenate([off_b0, off_b1]))
    fracs = np.arange(n) / (n - 1)
    var_b = apply_rotation_offsets(traj, list(slerp(fracs)))
    return [var_a, var_b]


def add_field_noise(field: PerspectiveField, up_sigma_deg: float, lat_sigma_deg: float,
                    rng: np.random.Generator, heteroscedastic: bool = False) -> PerspectiveField:
    """Perturb a clean field: in-plane up rotation by N(0, up_sigma) and
    latitude offset by N(0, lat_sigma), recording inverse-variance
    confidence.

    With ``heteroscedastic`` the noise scale ramps smoothly from 0.5x at the
    left edge to 2x at the right edge and the confidence follows per sample.
    """
    if up_sigma_deg < 0 or lat_sigma_deg < 0:
        raise ValueError("noise sigmas must be non-negative")
    up_s = math.radians(up_sigma_deg)
    lat_s = math.radians(lat_sigma_deg)
    h, w = field.height, field.width

    if heteroscedastic:
        ramp = 0.5 + 1.5 * (np.arange(w) / max(w - 1, 1))
        scale = np.tile(ramp, (h, 1))
    else:
        scale = np.ones((h, w))

    if up_s == 0 and lat_s == 0:
        out = field.copy()
        out.confidence = np.ones((h, w))
        return out

    ang = rng.normal(0.0, 1.0, size=(h, w)) * up_s * scale
    dlat = rng.normal(0.0, 1.0, size=(h, w)) * lat_s * scale
    c, s = np.cos(ang), np.sin(ang)
    ux, uy = field.up[..., 0], field.up[..., 1]
    up = np.stack([c * ux - s * uy, s * ux + c * uy], axis=-1)
    lat = np.clip(field.latitude + dlat, -math.pi / 2, math.pi / 2)

    # mean per-component noise variance: the up rotation spreads its angle
    # variance over two components, the latitude keeps its own
    base_var = (up_s**2 + lat_s**2) / 3.0
    conf = 1.0 / (base_var * scale**2)

    up = np.where(field.valid[..., None], up, 0.0)
    lat = np.where(field.valid, lat, 0.0)
    return PerspectiveField(up=up, latitude=lat, confidence=conf, valid=field.valid.copy())


def generate_clip(pano: EquirectImage, traj: Trajectory, cam: CameraIntrinsics,
                  spec: ClipSpec) -> DatasetManifest:
    """Write one clip: frames (PNG), ground-truth fields (PFF), camera JSON,
    and a manifest JSON.  Deterministic for fixed inputs and spec."""
    from . import fileio
    from PIL import Image

    if (cam.width, cam.height) != (spec.width, spec.height):
        raise ValueError("camera size does not match the clip resolution")
    out_dir = Path(spec.out_dir)
    clip_dir = out_dir / spec.clip_id
    (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
    (clip_dir / "fields").mkdir(parents=True, exist_ok=True)

    resampled = traj.resampled(spec.frame_count)
    grid = GridSpec(spec.field_stride) if spec.field_stride else default_grid(cam)

    camera_json = fileio.camera_to_json(cam)
    fileio.write_json(clip_dir / "camera.json", camera_json)

    manifest = DatasetManifest(
        clip_id=spec.clip_id,
        pano_id=spec.pano_id,
        camera=camera_json,
        fps=spec.fps,
        frame_count=spec.frame_count,
        width=spec.width,
        height=spec.height,
        seed=spec.seed,
    )
    for i in range(spec.frame_count):
        R = resampled.rotation(i)
        img, _ = reproject(pano, R, cam)
        gravity, gt_field = gt_annotation(cam, R, grid)
        img_path = clip_dir / "frames" / f"{i:04d}.png"
        field_path = clip_dir / "fields" / f"{i:04d}.pff"
        Image.fromarray(img).save(img_path)
        fileio.write_pff(field_path, gt_field)
        manifest.frames.append({
            "index": i,
            "time": float(resampled.times[i]),
            "image": str(img_path.relative_to(out_dir)),
            "field": str(field_path.relative_to(out_dir)),
            "q_wxyz": [float(x) for x in resampled.quats_wxyz[i]],
            "t": [float(x) for x in resampled.translations[i]],
            "gravity": fileio.gravity_to_json(gravity),
        })

    manifest_path = clip_dir / "manifest.json"
    fileio.write_json(manifest_path, manifest.to_dict())
    for fr in manifest.frames:
        for key in ("image", "field"):
            if not (out_dir / fr[key]).exists():
                raise RuntimeError(f"missing output {fr[key]}")
    return manifest
