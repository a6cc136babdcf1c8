"""File codecs: the PFF binary field format, camera / gravity / result JSON,
trajectory CSV, and deterministic JSON writing.

PFF layout (all little-endian regardless of host): magic ``PFLD``, uint32
version (1), uint32 height, uint32 width, uint32 channel flags (bit0 up,
bit1 latitude, bit2 confidence, bit3 validity), then row-major float32
planes in flag order; the up field is stored as two planes (u_x then u_y)
and validity as 0/1 floats.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import List, Union

import numpy as np

from .camera import CameraIntrinsics, CameraModel
from .datagen import Trajectory
from .fields import PerspectiveField
from .gravity import GravityState
from .solver import CalibrationEstimate

__all__ = [
    "DecodeError",
    "PFF_MAGIC",
    "write_pff",
    "read_pff",
    "camera_to_json",
    "camera_from_json",
    "gravity_to_json",
    "gravity_from_json",
    "estimate_to_json",
    "write_json",
    "read_json",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

PFF_MAGIC = b"PFLD"
PFF_VERSION = 1

_FLAG_UP = 1 << 0
_FLAG_LAT = 1 << 1
_FLAG_CONF = 1 << 2
_FLAG_VALID = 1 << 3


class DecodeError(Exception):
    """A file failed structural validation while decoding."""


def write_pff(path: Union[str, Path], field: PerspectiveField) -> None:
    # plane order follows ascending flag bits: up (two planes), latitude,
    # confidence, validity
    flags = _FLAG_UP | _FLAG_LAT | _FLAG_VALID
    planes = [field.up[..., 0], field.up[..., 1], field.latitude]
    if field.confidence is not None:
        flags |= _FLAG_CONF
        planes.append(field.confidence)
    planes.append(field.valid.astype(np.float32))
    header = PFF_MAGIC + struct.pack("<IIII", PFF_VERSION, field.height, field.width, flags)
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in planes)
    Path(path).write_bytes(header + body)


def read_pff(path: Union[str, Path]) -> PerspectiveField:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise DecodeError(f"{path}: truncated header")
    if raw[:4] != PFF_MAGIC:
        raise DecodeError(f"{path}: bad magic {raw[:4]!r}")
    version, height, width, flags = struct.unpack("<IIII", raw[4:20])
    if version != PFF_VERSION:
        raise DecodeError(f"{path}: unsupported version {version}")
    if not (flags & _FLAG_UP) or not (flags & _FLAG_LAT):
        raise DecodeError(f"{path}: up and latitude planes are mandatory")
    n_planes = 2 + 1 + (1 if flags & _FLAG_CONF else 0) + (1 if flags & _FLAG_VALID else 0)
    expected = 20 + n_planes * height * width * 4
    if len(raw) != expected:
        raise DecodeError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw[20:], dtype="<f4").reshape(n_planes, height, width)
    if not np.isfinite(data).all():
        raise DecodeError(f"{path}: non-finite values in field planes")
    up = np.stack([data[0], data[1]], axis=-1).astype(float)
    idx = 2
    lat = data[idx].astype(float)
    if np.any(np.abs(lat) > math.pi / 2 + 1e-4):
        raise DecodeError(f"{path}: latitude plane outside [-pi/2, pi/2]")
    # float32 storage can round boundary values a hair past pi/2
    lat = np.clip(lat, -math.pi / 2, math.pi / 2)
    idx += 1
    conf = None
    if flags & _FLAG_CONF:
        conf = data[idx].astype(float)
        idx += 1
    valid = None
    if flags & _FLAG_VALID:
        valid = data[idx] > 0.5
    try:
        return PerspectiveField(up=up, latitude=lat, confidence=conf, valid=valid)
    except ValueError as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def camera_to_json(cam: CameraIntrinsics) -> dict:
    out = {
        "model": cam.model.value,
        "width": cam.width,
        "height": cam.height,
        "f_px": cam.f,
        "cx": cam.cx,
        "cy": cam.cy,
    }
    if cam.model is CameraModel.SIMPLE_RADIAL:
        out["k1"] = cam.distortion
    elif cam.model is CameraModel.UCM:
        out["xi"] = cam.distortion
    return out


def camera_from_json(obj: dict) -> CameraIntrinsics:
    try:
        model = CameraModel.from_tag(obj["model"])
        width, height = int(obj["width"]), int(obj["height"])
        f = float(obj["f_px"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad camera record: {exc}") from exc
    cx, cy = float(obj.get("cx", width / 2)), float(obj.get("cy", height / 2))
    if abs(cx - width / 2) > 1e-6 or abs(cy - height / 2) > 1e-6:
        raise DecodeError("principal point must sit at the image center")
    dist = None
    if model is CameraModel.SIMPLE_RADIAL:
        if "k1" not in obj:
            raise DecodeError("simple_radial camera requires k1")
        dist = float(obj["k1"])
    elif model is CameraModel.UCM:
        if "xi" not in obj:
            raise DecodeError("ucm camera requires xi")
        dist = float(obj["xi"])
    try:
        return CameraIntrinsics(model=model, width=width, height=height, f=f, distortion=dist)
    except ValueError as exc:
        raise DecodeError(f"bad camera record: {exc}") from exc


def gravity_to_json(g: GravityState) -> dict:
    return {
        "g": [float(x) for x in g.as_array()],
        "roll_deg": g.roll_deg,
        "pitch_deg": g.pitch_deg,
    }


def gravity_from_json(obj: dict) -> GravityState:
    try:
        return GravityState(np.asarray(obj["g"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad gravity record: {exc}") from exc


def estimate_to_json(est: CalibrationEstimate) -> dict:
    if isinstance(est.intrinsics, CameraIntrinsics):
        intr = camera_to_json(est.intrinsics)
    else:
        intr = [camera_to_json(c) for c in est.intrinsics]
    views = []
    for g, rms in zip(est.gravities, est.per_view_rms):
        rec = gravity_to_json(g)
        rec["rms"] = rms
        views.append(rec)
    return {
        "intrinsics": intr,
        "views": views,
        "converged": est.converged,
        "iterations": est.iterations,
        "final_cost": est.final_cost,
    }


def write_json(path: Union[str, Path], obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: Union[str, Path]) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DecodeError(f"{path}: invalid JSON ({exc})") from exc


def write_trajectory_csv(path: Union[str, Path], traj: Trajectory) -> None:
    lines = []
    for i in range(len(traj)):
        vals = [traj.times[i], *traj.quats_wxyz[i], *traj.translations[i]]
        lines.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory_csv(path: Union[str, Path]) -> Trajectory:
    times: List[float] = []
    quats: List[List[float]] = []
    trans: List[List[float]] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise DecodeError(f"{path}:{lineno}: expected 8 comma-separated values")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise DecodeError(f"{path}:{lineno}: {exc}") from exc
        times.append(vals[0])
        quats.append(vals[1:5])
        trans.append(vals[5:8])
    if not times:
        raise DecodeError(f"{path}: empty trajectory")
    try:
        return Trajectory(np.asarray(times), np.asarray(quats), np.asarray(trans))
    except ValueError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
