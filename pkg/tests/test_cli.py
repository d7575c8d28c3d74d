import json

import numpy as np
import pytest

from mpsfusion.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from mpsfusion.core import PointCloud
from mpsfusion.io import read_ply, write_ply
from oracles import rodrigues, rotation_angle_deg, sphere_points

SMALL = ["--width", "96", "--height", "80", "--grad-threshold", "0.08"]


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    assert main(["synth", "--out", str(out), "--keyframes", "2", "--step", "15", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def run(tmp_path_factory, bundle):
    out = tmp_path_factory.mktemp("run")
    assert main(["reconstruct", str(bundle), "--out", str(out), "--no-timings"]) == EXIT_OK
    return out


def test_synth_layout(bundle):
    names = {p.name for p in bundle.iterdir()}
    assert {"image_000000.png", "invdepth_000001.pfm", "poses.txt", "intrinsics.json", "gt"} <= names
    lines = (bundle / "poses.txt").read_text().splitlines()
    assert len(lines) == 2 and all(len(line.split()) == 9 for line in lines)
    assert json.loads((bundle / "intrinsics.json").read_text())["width"] == 96


def test_reconstruct_outputs(run):
    names = {p.name for p in run.iterdir()}
    assert {"cloud_000000.ply", "cloud_000001.ply", "global.ply", "metrics.json"} <= names
    header = (run / "global.ply").read_text().split("end_header")[0]
    assert "format ascii 1.0" in header
    for prop in ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"):
        assert f" {prop}\n" in header
    metrics = json.loads((run / "metrics.json").read_text())
    assert "error" not in metrics
    assert all("timings_ms" not in k for k in metrics["keyframes"])
    reg = metrics["keyframes"][1]["registration"]
    # a 15 degree step leaves part of the second view unseen by the first
    assert reg["fitness"] > 0.5
    # poses are exact, so the correction should stay close to identity
    assert rotation_angle_deg(np.asarray(reg["rotation"])) < 1.0


def test_reconstruct_is_byte_identical(tmp_path, bundle, run):
    again = tmp_path / "again"
    assert main(["reconstruct", str(bundle), "--out", str(again), "--no-timings"]) == EXIT_OK
    for name in ("global.ply", "cloud_000000.ply", "cloud_000001.ply", "metrics.json"):
        assert (again / name).read_bytes() == (run / name).read_bytes()


def test_reconstruct_missing_bundle(tmp_path):
    out = tmp_path / "out"
    assert main(["reconstruct", str(tmp_path / "missing"), "--out", str(out)]) == EXIT_FAILED
    rec = json.loads((out / "metrics.json").read_text())
    assert rec["error"]["code"] == "input_validation"
    assert not list(out.glob("*.ply"))


def test_reconstruct_bad_config(tmp_path, bundle):
    out = tmp_path / "out"
    code = main(["reconstruct", str(bundle), "--out", str(out), "--weight-position", "0"])
    assert code == EXIT_USAGE
    assert json.loads((out / "metrics.json").read_text())["error"]["code"] == "invalid_config"


def test_evaluate_run(tmp_path, bundle, run):
    report = tmp_path / "eval.json"
    assert main(["evaluate", "--run", str(run), "--bundle", str(bundle), "--out", str(report)]) == 0
    result = json.loads(report.read_text())
    saved = json.loads((run / "metrics.json").read_text())
    for rec, ref in zip(result["keyframes"], saved["keyframes"]):
        assert rec["fused_points"] == ref["fused_points"]
        assert rec["density_ratio"] == pytest.approx(ref["density_ratio"], rel=1e-12)
        assert rec["normal_error_median"] == pytest.approx(ref["normal_error_median"], abs=1e-3)


def test_evaluate_normals(tmp_path, bundle, capsys):
    gt = bundle / "gt" / "normals_000000.pfm"
    assert main(["evaluate", "--normals", str(gt), "--reference", str(gt)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["normal_error_median"] == pytest.approx(0.0, abs=1e-3)


def test_evaluate_needs_reference(bundle):
    assert main(["evaluate", "--normals", str(bundle / "gt" / "normals_000000.pfm")]) == EXIT_USAGE


def test_register(tmp_path):
    P = sphere_points(1500, 1.0, seed=3)
    R = rodrigues((0, 1, 1), np.deg2rad(2.0))
    write_ply(tmp_path / "src.ply", PointCloud(P))
    write_ply(tmp_path / "dst.ply", PointCloud(P @ R.T + [0.01, 0, 0]))
    args = ["register", str(tmp_path / "src.ply"), str(tmp_path / "dst.ply"),
            "--trim", "0", "--out", str(tmp_path / "aligned.ply"),
            "--merge", str(tmp_path / "merged.ply"), "--report", str(tmp_path / "reg.json")]
    assert main(args) == EXIT_OK
    rec = json.loads((tmp_path / "reg.json").read_text())
    np.testing.assert_allclose(rec["rotation"], R, atol=1e-4)
    assert rec["fitness"] == 1.0
    aligned = read_ply(tmp_path / "aligned.ply")
    np.testing.assert_allclose(aligned.positions, P @ R.T + [0.01, 0, 0], atol=1e-4)
    assert len(read_ply(tmp_path / "merged.ply")) == rec["merged_points"]


def test_register_no_overlap(tmp_path):
    P = sphere_points(200, 1.0, seed=4)
    write_ply(tmp_path / "a.ply", PointCloud(P))
    write_ply(tmp_path / "b.ply", PointCloud(P + 50.0))
    code = main(["register", str(tmp_path / "a.ply"), str(tmp_path / "b.ply"),
                 "--max-distance", "0.1", "--report", str(tmp_path / "r.json")])
    assert code == EXIT_FAILED
    assert json.loads((tmp_path / "r.json").read_text())["error"]["type"] == "InsufficientOverlap"


def test_weight_flags_default():
    from mpsfusion.cli import build_parser

    args = build_parser().parse_args(["reconstruct", "b", "--out", "o"])
    assert (args.weight_position, args.weight_normal) == (1.0, 3.0)
