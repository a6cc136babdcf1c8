import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from fieldcalib.cli import EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, main
from fieldcalib.datagen import Trajectory
from fieldcalib.fileio import read_pff, write_trajectory_csv


def run(*argv):
    return main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def write_small_traj(path: Path, n=5):
    q = Rotation.random(n, random_state=np.random.RandomState(3)).as_quat()[:, [3, 0, 1, 2]]
    traj = Trajectory(np.arange(n) * 0.5, q, np.random.default_rng(0).normal(size=(n, 3)))
    write_trajectory_csv(path, traj)


def write_small_pano(path: Path, h=32):
    from PIL import Image
    rng = np.random.default_rng(1)
    img = rng.integers(0, 255, size=(h, 2 * h, 3), dtype=np.uint8)
    Image.fromarray(img).save(path)


def test_synth_writes_pair(tmp_path):
    rc = run("synth", "--model", "pinhole", "--vfov", 70, "--roll", 10, "--pitch", -20,
             "--grid", 32, "--width", 64, "--height", 64, "--out", tmp_path, "--name", "f0")
    assert rc == EXIT_OK
    field = read_pff(tmp_path / "f0.pff")
    assert (field.width, field.height) == (32, 32)
    gt = json.loads((tmp_path / "f0.gt.json").read_text())
    assert gt["camera"]["model"] == "pinhole"
    assert abs(gt["gravity"]["roll_deg"] - 10.0) < 1e-9


def test_synth_noise_adds_confidence(tmp_path):
    rc = run("synth", "--noise-up", 5, "--noise-lat", 3, "--grid", 32,
             "--width", 64, "--height", 64, "--out", tmp_path, "--name", "n0")
    assert rc == EXIT_OK
    field = read_pff(tmp_path / "n0.pff")
    assert field.confidence is not None


def test_synth_deterministic_per_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = run("synth", "--noise-up", 5, "--noise-lat", 3, "--grid", 16,
                 "--width", 64, "--height", 64, "--seed", 7, "--out", out, "--name", "x")
        assert rc == EXIT_OK
    assert tree_bytes(a) == tree_bytes(b)


def test_calibrate_single_field(tmp_path):
    run("synth", "--model", "pinhole", "--vfov", 65, "--roll", 15, "--pitch", 50,
        "--grid", 64, "--width", 64, "--height", 64, "--out", tmp_path, "--name", "c0")
    rc = run("calibrate", tmp_path / "c0.pff", "--model", "pinhole",
             "--out", tmp_path / "result.json")
    assert rc == EXIT_OK
    res = json.loads((tmp_path / "result.json").read_text())
    gt = json.loads((tmp_path / "c0.gt.json").read_text())
    assert abs(res["intrinsics"]["f_px"] - gt["camera"]["f_px"]) / gt["camera"]["f_px"] < 1e-4
    assert len(res["views"]) == 1
    assert res["converged"] is True


def test_calibrate_modes_and_trace(tmp_path):
    for i, pitch in enumerate((40, 60, 80)):
        run("synth", "--model", "pinhole", "--vfov", 70, "--pitch", pitch,
            "--grid", 32, "--width", 64, "--height", 64, "--out", tmp_path,
            "--name", f"v{i}")
    fields = [tmp_path / f"v{i}.pff" for i in range(3)]
    rc = run("calibrate", *fields, "--model", "pinhole", "--mode", "shared",
             "--width", 64, "--height", 64,
             "--out", tmp_path / "shared.json", "--trace", tmp_path / "trace.json")
    assert rc == EXIT_OK
    shared = json.loads((tmp_path / "shared.json").read_text())
    assert isinstance(shared["intrinsics"], dict)
    assert len(shared["views"]) == 3
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["accepted_steps"] >= 1

    rc = run("calibrate", *fields, "--model", "pinhole", "--mode", "independent",
             "--width", 64, "--height", 64, "--out", tmp_path / "indep.json")
    assert rc == EXIT_OK
    indep = json.loads((tmp_path / "indep.json").read_text())
    assert isinstance(indep["intrinsics"], list) and len(indep["intrinsics"]) == 3


def test_calibrate_nonconvergence_exit_code(tmp_path):
    run("synth", "--noise-up", 8, "--noise-lat", 5, "--pitch", 45, "--grid", 32,
        "--width", 64, "--height", 64, "--seed", 3, "--out", tmp_path, "--name", "nn")
    rc = run("calibrate", tmp_path / "nn.pff", "--model", "pinhole",
             "--max-iters", 1, "--out", tmp_path / "r.json")
    assert rc == EXIT_NOT_CONVERGED
    assert (tmp_path / "r.json").exists()  # estimate still written


def test_calibrate_corrupt_field_is_data_error(tmp_path):
    p = tmp_path / "bad.pff"
    p.write_bytes(b"NOT A FIELD FILE")
    rc = run("calibrate", p, "--model", "pinhole", "--out", tmp_path / "r.json")
    assert rc == EXIT_DATA


def test_usage_error_exit_code(tmp_path):
    assert run("calibrate") == EXIT_USAGE
    assert run("nonsense") == EXIT_USAGE
    assert run("synth", "--model", "ucm", "--grid", 32, "--width", 64, "--height", 64,
               "--out", tmp_path) == EXIT_USAGE  # --xi missing


def test_pano_pipeline(tmp_path):
    pano = tmp_path / "pano.png"
    traj = tmp_path / "traj.csv"
    write_small_pano(pano)
    write_small_traj(traj)
    rc = run("pano", "--pano", pano, "--traj", traj, "--model", "pinhole",
             "--vfov", 70, "--width", 32, "--height", 32, "--frames", 5,
             "--field-stride", 4, "--out", tmp_path / "clips", "--clip-id", "t0")
    assert rc == EXIT_OK
    manifest = json.loads((tmp_path / "clips" / "t0" / "manifest.json").read_text())
    assert manifest["frame_count"] == 5
    assert len(manifest["frames"]) == 5
    for fr in manifest["frames"]:
        assert (tmp_path / "clips" / fr["image"]).exists()
        assert (tmp_path / "clips" / fr["field"]).exists()


def test_pano_match_and_augment(tmp_path):
    pano = tmp_path / "pano.png"
    traj = tmp_path / "traj.csv"
    write_small_pano(pano)
    write_small_traj(traj)
    cands = []
    rng = np.random.default_rng(5)
    for i in range(3):
        p = tmp_path / f"cand{i}.csv"
        n = 5 + 2 * i
        q = Rotation.random(n, random_state=np.random.RandomState(i)).as_quat()[:, [3, 0, 1, 2]]
        write_trajectory_csv(p, Trajectory(np.arange(n) * 0.3, q, rng.normal(size=(n, 3))))
        cands.append(p)
    rc = run("pano", "--pano", pano, "--traj", traj, "--model", "pinhole",
             "--vfov", 70, "--width", 32, "--height", 32, "--frames", 4,
             "--field-stride", 4, "--match", *cands, "--match-k", 2, "--augment",
             "--out", tmp_path / "clips", "--clip-id", "m0", "--seed", 2)
    assert rc == EXIT_OK
    matches = json.loads((tmp_path / "clips" / "m0.matches.json").read_text())
    assert len(matches) == 2
    assert matches[0]["rmse"] <= matches[1]["rmse"]
    for cid in ("m0", "m0-augA", "m0-augB"):
        assert (tmp_path / "clips" / cid / "manifest.json").exists()


def test_pano_deterministic(tmp_path):
    pano = tmp_path / "pano.png"
    traj = tmp_path / "traj.csv"
    write_small_pano(pano)
    write_small_traj(traj)
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        rc = run("pano", "--pano", pano, "--traj", traj, "--model", "pinhole",
                 "--vfov", 70, "--width", 32, "--height", 32, "--frames", 4,
                 "--field-stride", 4, "--augment", "--seed", 11, "--out", out)
        assert rc == EXIT_OK
        outs.append(tree_bytes(out))
    assert outs[0] == outs[1]


def test_eval_perfect_prediction(tmp_path, capsys):
    run("synth", "--model", "simple_radial", "--vfov", 70, "--k1", "-0.2",
        "--pitch", 55, "--grid", 64, "--width", 64, "--height", 64,
        "--out", tmp_path, "--name", "e0")
    run("calibrate", tmp_path / "e0.pff", "--model", "simple_radial",
        "--out", tmp_path / "res.json")
    rc = run("eval", "--pred", tmp_path / "res.json", "--gt", tmp_path / "e0.gt.json",
             "--out", tmp_path / "report.json", "--table", tmp_path / "report.txt",
             "--proj-error")
    assert rc == EXIT_OK
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["count"] == 1
    assert rep["metrics"]["vfov_deg"]["mean"] < 0.05
    assert rep["metrics"]["roll_deg"]["auc"]["1deg"] > 0.99
    assert rep["pixel_projection"]["recall"]["5%"] == 1.0
    assert (tmp_path / "report.txt").read_text().splitlines()[0].startswith("metric")


def test_eval_count_mismatch_is_data_error(tmp_path):
    run("synth", "--grid", 32, "--width", 64, "--height", 64, "--pitch", 50,
        "--out", tmp_path, "--name", "g0")
    run("calibrate", tmp_path / "g0.pff", "--model", "pinhole",
        "--out", tmp_path / "res.json")
    rc = run("eval", "--pred", tmp_path / "res.json",
             "--gt", tmp_path / "g0.gt.json", tmp_path / "g0.gt.json",
             "--out", tmp_path / "rep.json")
    assert rc == EXIT_DATA


def test_study_small_run_and_determinism(tmp_path):
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        rc = run("study", "--trials", 10, "--views", "1,2", "--noise-up", 5,
                 "--noise-lat", 3, "--image-size", 64, "--grid-stride", 4,
                 "--seed", 1, "--out", out)
        assert rc == EXIT_OK
        csv = (out / "study.csv").read_text()
        lines = csv.strip().splitlines()
        assert len(lines) == 1 + 4  # header + 2 view counts x 2 modes
        assert (out / "study.png").exists()
        outs.append(tree_bytes(out))
    assert outs[0] == outs[1]


def test_study_rejects_too_few_trials(tmp_path):
    rc = run("study", "--trials", 5, "--out", tmp_path)
    assert rc == EXIT_DATA


def test_selftest():
    assert run("selftest") == EXIT_OK


def test_threads_env_does_not_change_results(tmp_path, monkeypatch):
    outs = []
    for name, threads in (("t1", "1"), ("t2", "8")):
        monkeypatch.setenv("FIELDCALIB_THREADS", threads)
        out = tmp_path / name
        rc = run("synth", "--noise-up", 4, "--noise-lat", 2, "--grid", 16,
                 "--width", 64, "--height", 64, "--seed", 5, "--out", out, "--name", "x")
        assert rc == EXIT_OK
        outs.append(tree_bytes(out))
    assert outs[0] == outs[1]
