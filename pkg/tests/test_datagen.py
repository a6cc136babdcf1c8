import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from fieldcalib.camera import CameraModel, make_from_vfov, unproject
from fieldcalib.datagen import (
    ClipSpec,
    EquirectImage,
    Trajectory,
    add_field_noise,
    apply_rotation_offsets,
    augment_rotations,
    dir_from_pano_coords,
    generate_clip,
    gt_annotation,
    match_trajectories,
    pano_coords_from_dir,
    reproject,
    reproject_coords,
    sample_camera,
    sample_rotation_offset,
    umeyama_align,
)
from fieldcalib.fields import GridSpec, render_fields
from fieldcalib.gravity import gravity_from_angles

UCM_BOXES = {
    "wide": ((105.0, 140.0), (0.5, 0.95)),
    "fisheye": ((140.0, 180.0), (1.05, 2.0)),
    "extreme": ((160.0, 200.0), (1.5, 2.3)),
}


def random_pano(rng, height=32):
    return EquirectImage(rng.integers(0, 256, size=(height, 2 * height, 3), dtype=np.uint8))


def random_traj(rng, n=9, t0=0.0):
    times = t0 + np.arange(n) * 0.25
    quats = Rotation.random(n, random_state=np.random.RandomState(1)).as_quat()
    quats = quats[:, [3, 0, 1, 2]]
    trans = rng.normal(size=(n, 3))
    return Trajectory(times, quats, trans)


def upright_world_to_camera():
    # camera x = world x, camera y = -world z (down), camera z = world y
    return np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


# ---------------------------------------------------------------- sampler


def test_sample_camera_respects_boxes_and_mix():
    rng = np.random.default_rng(0)
    counts = {m: 0 for m in CameraModel}
    n = 4000
    for _ in range(n):
        cam = sample_camera(rng, 64, 64)
        counts[cam.model] += 1
        if cam.model is CameraModel.SIMPLE_RADIAL:
            assert abs(cam.k1) <= 0.6
        elif cam.model is CameraModel.UCM:
            from fieldcalib.camera import hfov
            xf = hfov(cam)
            in_box = any(
                lo - 1e-6 <= xf <= hi + 1e-6 and xlo <= cam.xi <= xhi
                for (lo, hi), (xlo, xhi) in UCM_BOXES.values()
            )
            assert in_box, (xf, cam.xi)
    assert counts[CameraModel.UCM] / n == pytest.approx(0.5, abs=0.03)
    assert counts[CameraModel.PINHOLE] / n == pytest.approx(0.25, abs=0.03)
    assert counts[CameraModel.SIMPLE_RADIAL] / n == pytest.approx(0.25, abs=0.03)


def test_sampled_pinhole_vfov_in_range():
    from fieldcalib.camera import vfov
    rng = np.random.default_rng(1)
    for _ in range(200):
        cam = sample_camera(rng, 64, 64)
        if cam.model is not CameraModel.UCM:
            assert 20.0 - 1e-9 <= vfov(cam) <= 105.0 + 1e-9


# ------------------------------------------------------------- reprojection


def test_pano_coords_round_trip():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lam, colat = pano_coords_from_dir(d)
    d2 = dir_from_pano_coords(lam, colat)
    assert np.linalg.norm(d - d2, axis=1).max() < 1e-12


def test_reproject_center_pixel_samples_forward_axis():
    cam = make_from_vfov(CameraModel.PINHOLE, 64, 64, 70.0)
    R = upright_world_to_camera()
    lam, colat, ok = reproject_coords(cam, R)
    assert ok.all()
    # the optical axis maps to R^T e_z in world coordinates
    fwd_world = R.T @ np.array([0.0, 0.0, 1.0])
    lam_c, colat_c = pano_coords_from_dir(fwd_world)
    # center of a 64x64 image falls between samples; check the analytic value
    # at the four central pixels against the axis coordinates
    assert abs(np.mean(colat[31:33, 31:33]) - colat_c) < 0.05
    ray, _ = unproject(cam, np.array([32.0, 32.0]))
    lam_exact, colat_exact = pano_coords_from_dir(R.T @ ray)
    assert abs(colat_exact - colat_c) < 1e-12
    assert abs(lam_exact - lam_c) < 1e-12


def test_reproject_90deg_yaw_shifts_longitude_exactly():
    cam = make_from_vfov(CameraModel.PINHOLE, 32, 32, 70.0)
    R = upright_world_to_camera()
    Rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    lam1, colat1, _ = reproject_coords(cam, R)
    # panning the camera by +90 deg about world up
    lam2, colat2, _ = reproject_coords(cam, R @ Rz90.T)
    dlam = np.degrees((lam2 - lam1 + math.pi) % (2 * math.pi) - math.pi)
    assert np.abs(dlam - 90.0).max() < 1e-9
    assert np.abs(colat2 - colat1).max() < 1e-12


def test_reproject_direction_round_trip():
    rng = np.random.default_rng(3)
    R = Rotation.random(random_state=np.random.RandomState(7)).as_matrix()
    for model, vf, dist in [
        (CameraModel.PINHOLE, 75.0, None),
        (CameraModel.SIMPLE_RADIAL, 80.0, -0.2),
        (CameraModel.UCM, 150.0, 1.5),
    ]:
        cam = make_from_vfov(model, 64, 64, vf, dist)
        pix = rng.uniform([0, 0], [64, 64], size=(1000, 2))
        rays, ok = unproject(cam, pix)
        world = rays[ok] @ R  # R^T per row
        lam, colat = pano_coords_from_dir(world)
        back = dir_from_pano_coords(lam, colat)
        ang = np.arccos(np.clip(np.einsum("ij,ij->i", world, back), -1, 1))
        assert ang.max() < 1e-6


def test_reproject_image_shapes_and_mask():
    rng = np.random.default_rng(4)
    pano = random_pano(rng)
    cam = make_from_vfov(CameraModel.UCM, 48, 48, 170.0, 2.0)
    img, ok = reproject(pano, upright_world_to_camera(), cam)
    assert img.shape == (48, 48, 3) and img.dtype == np.uint8
    assert not ok.all()
    assert (img[~ok] == 0).all()


# --------------------------------------------------------------- annotation


def test_gt_annotation_identity_rotation():
    cam = make_from_vfov(CameraModel.PINHOLE, 64, 64, 70.0)
    g, field = gt_annotation(cam, np.eye(3), GridSpec(2))
    assert_allclose(g.as_array(), [0, 0, 1], atol=1e-15)
    gh, gw = field.latitude.shape
    assert field.latitude[gh // 2, gw // 2] > math.pi / 2 - 0.1


def test_gt_annotation_upright():
    cam = make_from_vfov(CameraModel.PINHOLE, 64, 64, 70.0)
    R = upright_world_to_camera()
    g, field = gt_annotation(cam, R, GridSpec(2))
    assert_allclose(g.as_array(), [0, -1, 0], atol=1e-12)
    gh, gw = field.latitude.shape
    center_lat = 0.25 * (field.latitude[gh // 2 - 1:gh // 2 + 1, gw // 2 - 1:gw // 2 + 1]).sum()
    assert abs(center_lat) < 0.05
    up_c = field.up[gh // 2, gw // 2]
    assert up_c[1] < -0.9


def test_gt_annotation_matches_render():
    cam = make_from_vfov(CameraModel.SIMPLE_RADIAL, 64, 64, 80.0, 0.2)
    R = Rotation.random(random_state=np.random.RandomState(11)).as_matrix()
    g, field = gt_annotation(cam, R, GridSpec(4))
    ref = render_fields(cam, g, GridSpec(4))
    assert np.array_equal(field.up, ref.up)
    assert np.array_equal(field.latitude, ref.latitude)


# ------------------------------------------------------------------ umeyama


def test_umeyama_identity():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(20, 3))
    for mode in ("full", "yaw_scale"):
        tf = umeyama_align(pts, pts, mode=mode)
        assert_allclose(tf.s, 1.0, atol=1e-12)
        assert_allclose(tf.R, np.eye(3), atol=1e-12)
        assert_allclose(tf.t, 0.0, atol=1e-12)
        assert tf.rmse < 1e-12


def test_umeyama_full_exact_recovery():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(30, 3))
    ang = math.radians(30.0)
    Rz = np.array([[math.cos(ang), -math.sin(ang), 0],
                   [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
    dst = 2.0 * src @ Rz.T + np.array([1.0, 2.0, 3.0])
    tf = umeyama_align(src, dst, mode="full")
    assert abs(tf.s - 2.0) < 1e-9
    assert np.abs(tf.R - Rz).max() < 1e-9
    assert np.abs(tf.t - [1.0, 2.0, 3.0]).max() < 1e-9
    assert tf.rmse < 1e-9


def test_umeyama_full_general_rotation():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(25, 3))
    R = Rotation.random(random_state=np.random.RandomState(3)).as_matrix()
    dst = 0.7 * src @ R.T + [0.3, -0.2, 0.9]
    tf = umeyama_align(src, dst, mode="full")
    assert abs(tf.s - 0.7) < 1e-9
    assert np.abs(tf.R - R).max() < 1e-9
    assert tf.rmse < 1e-9


def test_umeyama_yaw_scale_axis_exactly_z():
    rng = np.random.default_rng(8)
    src = rng.normal(size=(30, 3))
    pitch = Rotation.from_euler("y", 20, degrees=True).as_matrix()
    dst = 1.5 * src @ pitch.T + [0.1, 0.2, 0.3]
    tf = umeyama_align(src, dst, mode="yaw_scale")
    # the recovered rotation is exactly about +Z
    assert tf.R[0, 2] == 0.0 and tf.R[1, 2] == 0.0
    assert tf.R[2, 0] == 0.0 and tf.R[2, 1] == 0.0
    assert tf.R[2, 2] == 1.0
    assert tf.rmse > 0.0


def test_umeyama_yaw_scale_recovers_yaw_transform():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(30, 3))
    ang = math.radians(-40.0)
    Rz = np.array([[math.cos(ang), -math.sin(ang), 0],
                   [math.sin(ang), math.cos(ang), 0], [0, 0, 1]])
    dst = 0.5 * src @ Rz.T + [4.0, -1.0, 2.0]
    tf = umeyama_align(src, dst, mode="yaw_scale")
    assert abs(tf.s - 0.5) < 1e-9
    assert np.abs(tf.R - Rz).max() < 1e-9
    assert tf.rmse < 1e-9


def test_umeyama_degenerate_errors():
    pts = np.zeros((5, 3))
    with pytest.raises(ValueError):
        umeyama_align(pts, pts, mode="full")
    line = np.stack([np.zeros(5), np.zeros(5), np.arange(5.0)], axis=1)
    with pytest.raises(ValueError):
        umeyama_align(line, line, mode="yaw_scale")  # no horizontal spread
    with pytest.raises(ValueError):
        umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)), mode="full")


# ------------------------------------------------------------- trajectories


def test_match_trajectories_self_match_first():
    rng = np.random.default_rng(10)
    target = random_traj(rng, n=9)
    noisy = []
    sigmas = [0.05, 0.3, 1.0]
    for s in sigmas:
        t = Trajectory(target.times, target.quats_wxyz,
                       target.translations + rng.normal(0, s, size=(9, 3)))
        noisy.append(t)
    candidates = noisy[:1] + [target] + noisy[1:]
    matches = match_trajectories(candidates, target, k=len(candidates))
    assert matches[0][0] == 1
    assert matches[0][1].rmse < 1e-12
    # ranking follows the injected noise levels
    rest = [i for i, _ in matches[1:]]
    assert rest == [0, 2, 3]
    rmses = [tf.rmse for _, tf in matches]
    assert rmses == sorted(rmses)


def test_match_trajectories_k_too_large():
    rng = np.random.default_rng(11)
    target = random_traj(rng)
    with pytest.raises(ValueError):
        match_trajectories([target], target, k=2)


def test_match_trajectories_resamples_candidates():
    rng = np.random.default_rng(12)
    target = random_traj(rng, n=9)
    dense = random_traj(rng, n=33)
    matches = match_trajectories([dense], target, k=1)
    assert matches[0][0] == 0


# -------------------------------------------------------------- augmentation


def test_apply_zero_offset_keeps_trajectory():
    rng = np.random.default_rng(13)
    traj = random_traj(rng)
    out = apply_rotation_offsets(traj, [Rotation.identity()] * len(traj))
    q1 = traj.quats_wxyz
    q2 = out.quats_wxyz
    # quaternions match up to global sign
    dots = np.abs(np.einsum("ij,ij->i", q1, q2))
    assert np.abs(dots - 1.0).max() < 1e-12


def test_augment_rotations_endpoints_and_units():
    rng = np.random.default_rng(14)
    traj = random_traj(rng)
    rng_aug = np.random.default_rng(99)
    var_a, var_b = augment_rotations(traj, rng_aug)
    assert np.abs(np.linalg.norm(var_a.quats_wxyz, axis=1) - 1).max() < 1e-9
    assert np.abs(np.linalg.norm(var_b.quats_wxyz, axis=1) - 1).max() < 1e-9

    # replay the documented draw order to check variant B's endpoints
    rng_replay = np.random.default_rng(99)
    off_a = sample_rotation_offset(rng_replay)
    off_b0 = sample_rotation_offset(rng_replay)
    off_b1 = sample_rotation_offset(rng_replay)
    expect_a = apply_rotation_offsets(traj, [off_a] * len(traj))
    dots = np.abs(np.einsum("ij,ij->i", expect_a.quats_wxyz, var_a.quats_wxyz))
    assert np.abs(dots - 1.0).max() < 1e-12

    first = apply_rotation_offsets(traj, [off_b0] * len(traj))
    last = apply_rotation_offsets(traj, [off_b1] * len(traj))
    assert abs(abs(np.dot(first.quats_wxyz[0], var_b.quats_wxyz[0])) - 1.0) < 1e-12
    assert abs(abs(np.dot(last.quats_wxyz[-1], var_b.quats_wxyz[-1])) - 1.0) < 1e-12


def test_sample_rotation_offset_ranges():
    rng = np.random.default_rng(15)
    for _ in range(100):
        rot = sample_rotation_offset(rng)
        yaw, pitch, roll = rot.as_euler("ZYX", degrees=True)
        assert -180.0 <= yaw <= 180.0
        assert -45.0 - 1e-9 <= pitch <= 45.0 + 1e-9
        assert -45.0 - 1e-9 <= roll <= 45.0 + 1e-9


# -------------------------------------------------------------- field noise


def make_clean_field():
    cam = make_from_vfov(CameraModel.PINHOLE, 64, 64, 70.0)
    g = gravity_from_angles(0.2, 1.0)
    return render_fields(cam, g, GridSpec(1))


def test_add_field_noise_zero_sigma_is_identity():
    f = make_clean_field()
    out = add_field_noise(f, 0.0, 0.0, np.random.default_rng(0))
    assert np.array_equal(out.up, f.up)
    assert np.array_equal(out.latitude, f.latitude)
    assert (out.confidence == 1.0).all()


def test_add_field_noise_preserves_up_norm():
    f = make_clean_field()
    out = add_field_noise(f, 8.0, 4.0, np.random.default_rng(1))
    norms = np.linalg.norm(out.up[out.valid], axis=-1)
    assert np.abs(norms - 1.0).max() < 1e-9


def test_add_field_noise_negative_sigma_rejected():
    f = make_clean_field()
    with pytest.raises(ValueError):
        add_field_noise(f, -1.0, 0.0, np.random.default_rng(0))


def test_add_field_noise_empirical_std():
    # inject on a zero-latitude field so the clamp never bites
    up = np.zeros((320, 320, 2))
    up[..., 1] = -1.0
    f0 = type(make_clean_field())(up=up, latitude=np.zeros((320, 320)))
    out = add_field_noise(f0, 0.0, 3.0, np.random.default_rng(2))
    injected = np.degrees(out.latitude - f0.latitude).ravel()
    assert injected.shape[0] > 1e5
    assert abs(injected.std() - 3.0) / 3.0 < 0.02


def test_add_field_noise_heteroscedastic_confidence_ramp():
    f = make_clean_field()
    out = add_field_noise(f, 5.0, 3.0, np.random.default_rng(3), heteroscedastic=True)
    # confidence decreases with the noise ramp from left to right
    assert np.all(np.diff(out.confidence[0]) < 0)
    ratio = out.confidence[0, 0] / out.confidence[0, -1]
    assert_allclose(ratio, (2.0 / 0.5) ** 2, rtol=1e-9)


# ---------------------------------------------------------------- clip output


def test_generate_clip_small(tmp_path):
    rng = np.random.default_rng(16)
    pano = random_pano(rng)
    traj = random_traj(rng, n=5)
    cam = make_from_vfov(CameraModel.PINHOLE, 32, 32, 70.0)
    spec = ClipSpec(out_dir=tmp_path, clip_id="clip", frame_count=7, fps=16.0,
                    width=32, height=32, field_stride=2, seed=5)
    manifest = generate_clip(pano, traj, cam, spec)
    assert manifest.frame_count == 7
    assert len(manifest.frames) == 7
    for fr in manifest.frames:
        assert (tmp_path / fr["image"]).exists()
        assert (tmp_path / fr["field"]).exists()
    m1 = (tmp_path / "clip" / "manifest.json").read_bytes()
    generate_clip(pano, traj, cam, spec)
    m2 = (tmp_path / "clip" / "manifest.json").read_bytes()
    assert m1 == m2


def test_equirect_validates_aspect():
    with pytest.raises(ValueError):
        EquirectImage(np.zeros((32, 32, 3), dtype=np.uint8))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.array([[1, 0, 0, 0]] * 2), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 1.0]), np.array([[2, 0, 0, 0]] * 2), np.zeros((2, 3)))
