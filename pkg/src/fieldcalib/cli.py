"""Command-line surface: synth, calibrate, pano, eval, study, selftest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver
non-convergence (the estimate is still written).  Every subcommand is
deterministic for a fixed ``--seed``; the computation is single-threaded
numpy, so outputs do not depend on the thread count (``--threads`` /
``FIELDCALIB_THREADS`` is recorded for bookkeeping only).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import datagen, fileio, metrics, study
from .camera import CameraIntrinsics, CameraModel, make_from_vfov
from .fields import GridSpec, PerspectiveField, render_fields
from .gravity import gravity_from_angles
from .solver import SolveConfig, diag_report, solve

log = logging.getLogger("fieldcalib")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3

DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    threads: int
    out_dir: Path
    verbosity: int


def _run_config(args) -> RunConfig:
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("FIELDCALIB_THREADS", "1"))
    out = Path(getattr(args, "out", ".") or ".")
    return RunConfig(seed=args.seed, threads=threads, out_dir=out, verbosity=args.verbose)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help=f"RNG seed (default {DEFAULT_SEED})")
    p.add_argument("--threads", type=int, default=None,
                   help="thread count hint (default from FIELDCALIB_THREADS; results never depend on it)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _model_from_args(args) -> CameraModel:
    return CameraModel.from_tag(args.model)


def _camera_from_args(args, rng) -> CameraIntrinsics:
    if getattr(args, "sample_camera", False):
        return datagen.sample_camera(rng, args.width, args.height)
    model = _model_from_args(args)
    if model is CameraModel.SIMPLE_RADIAL:
        dist = args.k1
        if dist is None:
            raise UsageError("--k1 is required for simple_radial")
    elif model is CameraModel.UCM:
        dist = args.xi
        if dist is None:
            raise UsageError("--xi is required for ucm")
    else:
        dist = None
    return make_from_vfov(model, args.width, args.height, args.vfov, dist)


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    rng = np.random.default_rng(cfg.seed)
    cam = _camera_from_args(args, rng)
    if args.width % args.grid or args.height % args.grid:
        raise UsageError(f"--grid {args.grid} must divide the image size")
    grid = GridSpec(stride=args.width // args.grid)
    g = gravity_from_angles(math.radians(args.roll), math.radians(args.pitch))
    field = render_fields(cam, g, grid)
    if args.noise_up > 0 or args.noise_lat > 0:
        field = datagen.add_field_noise(field, args.noise_up, args.noise_lat, rng,
                                        heteroscedastic=args.heteroscedastic)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    pff_path = cfg.out_dir / f"{args.name}.pff"
    gt_path = cfg.out_dir / f"{args.name}.gt.json"
    fileio.write_pff(pff_path, field)
    fileio.write_json(gt_path, {
        "camera": fileio.camera_to_json(cam),
        "gravity": fileio.gravity_to_json(g),
        "seed": cfg.seed,
    })
    print(pff_path)
    print(gt_path)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _run_config(args)
    fields: List[PerspectiveField] = [fileio.read_pff(p) for p in args.fields]
    solve_cfg = SolveConfig(
        model=_model_from_args(args),
        shared_intrinsics=(args.mode == "shared"),
        max_iters=args.max_iters,
        init_vfov_deg=args.init_vfov,
        huber_delta=args.huber,
        init_fov_scan=not args.no_fov_scan,
    )
    image_size = None
    if args.width is not None or args.height is not None:
        if args.width is None or args.height is None:
            raise UsageError("--width and --height must be given together")
        image_size = (args.width, args.height)
    est = solve(fields, solve_cfg, image_size=image_size)
    out = Path(args.out) if args.out else Path("result.json")
    fileio.write_json(out, fileio.estimate_to_json(est))
    print(out)
    if args.trace:
        fileio.write_json(Path(args.trace), diag_report(est))
        print(args.trace)
    if not est.converged:
        log.warning("solver did not converge: %s", est.message)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_pano(path: str) -> datagen.EquirectImage:
    from PIL import Image

    try:
        img = np.asarray(Image.open(path).convert("RGB"))
    except OSError as exc:
        raise fileio.DecodeError(f"{path}: {exc}") from exc
    return datagen.EquirectImage(img)


def cmd_pano(args) -> int:
    cfg = _run_config(args)
    rng = np.random.default_rng(cfg.seed)
    pano = _load_pano(args.pano)
    target = fileio.read_trajectory_csv(args.traj)
    if args.camera:
        cam = fileio.camera_from_json(fileio.read_json(args.camera))
        args.width, args.height = cam.width, cam.height
    else:
        cam = _camera_from_args(args, rng)

    traj = target
    if args.match:
        candidates = [fileio.read_trajectory_csv(p) for p in args.match]
        k = min(args.match_k, len(candidates))
        matches = datagen.match_trajectories(candidates, target, k)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        fileio.write_json(cfg.out_dir / f"{args.clip_id}.matches.json", [
            {"candidate": int(i), "rmse": tf.rmse, "scale": tf.s,
             "yaw_deg": math.degrees(math.atan2(tf.R[1, 0], tf.R[0, 0]))}
            for i, tf in matches
        ])
        best_idx = matches[0][0]
        best = candidates[best_idx].resampled(len(target))
        # transfer the matched rotational dynamics onto the target's path
        traj = datagen.Trajectory(target.times, best.quats_wxyz, target.translations)

    clips = [(args.clip_id, traj)]
    if args.augment:
        aug_a, aug_b = datagen.augment_rotations(traj, rng)
        clips += [(f"{args.clip_id}-augA", aug_a), (f"{args.clip_id}-augB", aug_b)]

    for clip_id, t in clips:
        spec = datagen.ClipSpec(
            out_dir=cfg.out_dir,
            clip_id=clip_id,
            pano_id=Path(args.pano).stem,
            frame_count=args.frames,
            fps=args.fps,
            width=args.width,
            height=args.height,
            field_stride=args.field_stride,
            seed=cfg.seed,
        )
        manifest = datagen.generate_clip(pano, t, cam, spec)
        print(cfg.out_dir / clip_id / "manifest.json")
        log.info("clip %s: %d frames", clip_id, manifest.frame_count)
    return EXIT_OK


def _expand_predictions(paths: Sequence[str]):
    """Yield (camera, gravity) per predicted view across result files."""
    out = []
    for path in paths:
        obj = fileio.read_json(path)
        try:
            views = obj["views"]
            intr = obj["intrinsics"]
        except KeyError as exc:
            raise fileio.DecodeError(f"{path}: missing {exc} in result JSON") from exc
        for i, view in enumerate(views):
            cam_obj = intr[i] if isinstance(intr, list) else intr
            out.append((fileio.camera_from_json(cam_obj), fileio.gravity_from_json(view)))
    return out


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    preds = _expand_predictions(args.pred)
    gts = []
    for path in args.gt:
        obj = fileio.read_json(path)
        try:
            gts.append((fileio.camera_from_json(obj["camera"]),
                        fileio.gravity_from_json(obj["gravity"])))
        except KeyError as exc:
            raise fileio.DecodeError(f"{path}: missing {exc} in ground-truth JSON") from exc
    if len(preds) != len(gts):
        raise fileio.DecodeError(
            f"{len(preds)} predicted views but {len(gts)} ground-truth records")

    samples = []
    proj_errors = []
    dist_errors = []
    for (cam_p, g_p), (cam_g, g_g) in zip(preds, gts):
        if (cam_p.width, cam_p.height) != (cam_g.width, cam_g.height):
            cam_p = cam_p.scaled(cam_g.width / cam_p.width)
        samples.append(metrics.error_sample(cam_p, g_p, cam_g, g_g))
        if cam_p.model is cam_g.model and cam_g.distortion is not None:
            dist_errors.append(abs(cam_p.distortion - cam_g.distortion))
        if args.proj_error:
            proj_errors.append(metrics.pixel_projection_error(cam_p, cam_g)[0])

    rep = metrics.report(samples)
    out = rep.to_json_dict()
    if dist_errors:
        arr = np.asarray(dist_errors)
        out["distortion_abs"] = {"mean": float(arr.mean()), "median": float(np.median(arr))}
    if proj_errors:
        arr = np.asarray(proj_errors)
        out["pixel_projection"] = {
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "recall": {f"{int(t * 100)}%": float((arr <= t).mean())
                       for t in metrics.FOCAL_AUC_THRESHOLDS},
        }
    out_path = Path(args.out) if args.out else Path("report.json")
    fileio.write_json(out_path, out)
    table = rep.to_text()
    if args.table:
        Path(args.table).write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _run_config(args)
    try:
        views = tuple(int(v) for v in args.views.split(","))
    except ValueError:
        raise UsageError(f"bad --views list: {args.views!r}")
    spec = study.StudySpec(
        model=_model_from_args(args),
        trials=args.trials,
        view_counts=views,
        up_sigma_deg=args.noise_up,
        lat_sigma_deg=args.noise_lat,
        seed=cfg.seed,
        image_size=args.image_size,
        grid_stride=args.grid_stride,
    )
    rows, _ = study.run_views_study(spec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.out_dir / "study.csv"
    csv_path.write_text(study.rows_to_csv(rows))
    png_path = cfg.out_dir / "study.png"
    _plot_study(rows, png_path)
    print(csv_path)
    print(png_path)
    return EXIT_OK


def _plot_study(rows: Sequence[study.StudyRow], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for mode, marker in (("shared", "o"), ("independent", "s")):
        sel = [r for r in rows if r.mode == mode]
        ax.plot([r.n_views for r in sel], [r.median_focal_rel for r in sel],
                marker=marker, label=mode)
    ax.set_xlabel("number of views")
    ax.set_ylabel("median relative focal error")
    ax.set_xscale("log", base=2)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_selftest(args) -> int:
    """Quick internal consistency checks."""
    from .gravity import gravity_angular_error

    checks = []
    rng = np.random.default_rng(0)

    cam = make_from_vfov(CameraModel.UCM, 64, 64, 150.0, 1.5)
    from .camera import project, unproject
    pix = rng.uniform([0, 0], [64, 64], size=(500, 2))
    rays, ok = unproject(cam, pix)
    uv, ok2 = project(cam, np.where(ok[:, None], rays, [0, 0, 1]))
    err = float(np.abs(uv[ok & ok2] - pix[ok & ok2]).max())
    checks.append(("ucm project/unproject round trip < 1e-6 px", err < 1e-6))

    g = gravity_from_angles(0.3, 0.9)
    field = render_fields(make_from_vfov(CameraModel.PINHOLE, 64, 64, 70.0), g, GridSpec(1))
    est = solve([field], SolveConfig(model=CameraModel.PINHOLE))
    checks.append(("pinhole noiseless solve converges",
                   est.converged and gravity_angular_error(est.gravities[0], g) < 0.02))

    checks.append(("auc closed form", abs(metrics.auc_at([0.5, 2, 6], 5) - 0.5) < 1e-12))

    failures = 0
    for name, ok_flag in checks:
        print(f"[{'PASS' if ok_flag else 'FAIL'}] {name}")
        failures += 0 if ok_flag else 1
    return EXIT_OK if failures == 0 else EXIT_DATA


def build_parser() -> _Parser:
    p = _Parser(prog="fieldcalib",
                description="Camera calibration from dense perspective fields")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="render a synthetic field (+ optional noise)")
    ps.add_argument("--model", default="pinhole",
                    choices=[m.value for m in CameraModel])
    ps.add_argument("--vfov", type=float, default=70.0, help="vertical FoV in degrees")
    ps.add_argument("--k1", type=float, default=None)
    ps.add_argument("--xi", type=float, default=None)
    ps.add_argument("--width", type=int, default=640)
    ps.add_argument("--height", type=int, default=640)
    ps.add_argument("--roll", type=float, default=0.0, help="gravity roll in degrees")
    ps.add_argument("--pitch", type=float, default=0.0, help="gravity pitch in degrees")
    ps.add_argument("--grid", type=int, default=64, help="field samples per axis")
    ps.add_argument("--noise-up", type=float, default=0.0)
    ps.add_argument("--noise-lat", type=float, default=0.0)
    ps.add_argument("--heteroscedastic", action="store_true")
    ps.add_argument("--sample-camera", action="store_true",
                    help="draw the camera from the dataset sampler instead")
    ps.add_argument("--out", default=".")
    ps.add_argument("--name", default="field")
    _add_common(ps)
    ps.set_defaults(func=cmd_synth)

    pc = sub.add_parser("calibrate", help="recover intrinsics + gravity from PFF fields")
    pc.add_argument("fields", nargs="+", help="input .pff files")
    pc.add_argument("--model", default="pinhole", choices=[m.value for m in CameraModel])
    pc.add_argument("--mode", default="shared", choices=["shared", "independent"])
    pc.add_argument("--width", type=int, default=None,
                    help="image width if the fields are subsampled")
    pc.add_argument("--height", type=int, default=None)
    pc.add_argument("--max-iters", type=int, default=100)
    pc.add_argument("--init-vfov", type=float, default=55.0)
    pc.add_argument("--huber", type=float, default=None)
    pc.add_argument("--no-fov-scan", action="store_true")
    pc.add_argument("--out", default="result.json")
    pc.add_argument("--trace", default=None, help="write per-iteration diagnostics JSON")
    _add_common(pc)
    pc.set_defaults(func=cmd_calibrate)

    pp = sub.add_parser("pano", help="generate dataset clips from a panorama")
    pp.add_argument("--pano", required=True, help="equirectangular image (width = 2x height)")
    pp.add_argument("--traj", required=True, help="target trajectory CSV")
    pp.add_argument("--camera", default=None, help="camera JSON (else --sample-camera)")
    pp.add_argument("--sample-camera", action="store_true")
    pp.add_argument("--model", default="pinhole", choices=[m.value for m in CameraModel])
    pp.add_argument("--vfov", type=float, default=70.0)
    pp.add_argument("--k1", type=float, default=None)
    pp.add_argument("--xi", type=float, default=None)
    pp.add_argument("--width", type=int, default=640)
    pp.add_argument("--height", type=int, default=640)
    pp.add_argument("--frames", type=int, default=81)
    pp.add_argument("--fps", type=float, default=16.0)
    pp.add_argument("--field-stride", type=int, default=None)
    pp.add_argument("--clip-id", default="clip000")
    pp.add_argument("--match", nargs="*", default=None,
                    help="candidate trajectory CSVs to match against --traj")
    pp.add_argument("--match-k", type=int, default=30)
    pp.add_argument("--augment", action="store_true")
    pp.add_argument("--out", default="clips")
    _add_common(pp)
    pp.set_defaults(func=cmd_pano)

    pe = sub.add_parser("eval", help="score predictions against ground truth")
    pe.add_argument("--pred", nargs="+", required=True, help="result JSON files")
    pe.add_argument("--gt", nargs="+", required=True, help="ground-truth JSON files")
    pe.add_argument("--proj-error", action="store_true",
                    help="also report relative pixel projection error")
    pe.add_argument("--out", default="report.json")
    pe.add_argument("--table", default=None)
    _add_common(pe)
    pe.set_defaults(func=cmd_eval)

    pt = sub.add_parser("study", help="views-vs-error Monte-Carlo study")
    pt.add_argument("--trials", type=int, default=50)
    pt.add_argument("--views", default="1,2,4,8")
    pt.add_argument("--noise-up", type=float, default=5.0)
    pt.add_argument("--noise-lat", type=float, default=3.0)
    pt.add_argument("--model", default="pinhole", choices=[m.value for m in CameraModel])
    pt.add_argument("--image-size", type=int, default=128)
    pt.add_argument("--grid-stride", type=int, default=4)
    pt.add_argument("--out", default="study_out")
    _add_common(pt)
    pt.set_defaults(func=cmd_study)

    pq = sub.add_parser("selftest", help="quick internal consistency checks")
    pq.add_argument("--out", default=".")
    _add_common(pq)
    pq.set_defaults(func=cmd_selftest)

    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (fileio.DecodeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
