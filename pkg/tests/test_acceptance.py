"""End-to-end acceptance criteria on synthetic oracles.

Every criterion logs one PASS/FAIL line (see the summary section at the end
of a pytest run) and then asserts at its stated tolerance.
"""

import json
import time
import warnings

import numpy as np
import pytest

from mpsfusion.cli import main
from mpsfusion.core import CameraIntrinsics, CameraPose, DepthMap, quat_to_rotation
from mpsfusion.fusion import FusedSurface, FusionConfig, joint_optimize
from mpsfusion.icp import IcpConfig, icp_register
from mpsfusion.core import PointCloud
from mpsfusion.ingest import (
    backproject_grid,
    depth_to_prior_normals,
    fill_holes_bilinear,
    invdepth_to_depth,
    rescale_depth,
)
from mpsfusion.io import read_bundle, read_ply
from mpsfusion.mps import MultispectralPhotometricStereo, recover_normals
from mpsfusion.pipeline import KEYFRAME_BUDGET_S, PipelineConfig, run_pipeline
from mpsfusion.synth import SceneSpec, render_multispectral, save_keyframes
from oracles import (
    angle_between_deg,
    plane_depth,
    quat_axis_angle,
    random_unit_quaternions,
    rodrigues,
    rotation_angle_deg,
    sphere_points,
)

pytestmark = pytest.mark.acceptance


def normal_errors(normals, render):
    sel = normals.valid & ~render.shadow
    return angle_between_deg(normals.normals[sel], render.normals.normals[sel])


def test_criterion_1_quaternion_oracle(acceptance_log):
    worst = 0.0
    for q in random_unit_quaternions(1000, seed=2024):
        axis, angle = quat_axis_angle(q)
        worst = max(worst, float(np.abs(quat_to_rotation(q) - rodrigues(axis, angle)).max()))
    ok = acceptance_log(1, worst <= 1e-9, f"max |R - R_rodrigues| = {worst:.2e} (tol 1e-9)")
    assert ok


def test_criterion_2_mps_closure(acceptance_log, textured_keyframe_512, intr_512):
    r = textured_keyframe_512.render
    t0 = time.perf_counter()
    priors = depth_to_prior_normals(r.depth, intr_512)
    est = MultispectralPhotometricStereo().fit(r.image, priors)
    normals = recover_normals(r.image, est.mixing_, est.mask_)
    elapsed = time.perf_counter() - t0
    err = normal_errors(normals, r)
    med, p95 = float(np.median(err)), float(np.percentile(err, 95))
    ok = acceptance_log(
        2,
        med <= 2.0 and p95 <= 5.0 and elapsed < 1.0,
        f"median {med:.4f} deg (<= 2), p95 {p95:.4f} deg (<= 5), "
        f"estimate+recover {elapsed:.3f} s (< 1)",
    )
    assert ok


def test_criterion_3_noisy_priors(acceptance_log, textured_keyframe_512, intr_512):
    kf = textured_keyframe_512
    b, r = kf.bundle, kf.render
    depth = rescale_depth(invdepth_to_depth(b.inverse_depth), b.scale)
    filled = fill_holes_bilinear(depth)
    priors = depth_to_prior_normals(filled, intr_512, smoothing=5.0)
    est = MultispectralPhotometricStereo(trim_fraction=0.2).fit(
        b.image, priors, interpolated=filled.interpolated
    )
    err = normal_errors(recover_normals(b.image, est.mixing_, est.mask_), r)
    med = float(np.median(err))
    frac = depth.valid.sum() / r.depth.valid.sum()
    ok = acceptance_log(
        3, med <= 5.0, f"median {med:.3f} deg (<= 5) from {frac:.1%} semi-dense priors"
    )
    assert ok


def test_criterion_4_multi_chromaticity(acceptance_log, rig, intr_512, front_pose):
    scene = SceneSpec(albedo=((0.9, 0.5, 0.3), (0.3, 0.6, 0.9)), layout="split")
    r = render_multispectral(scene, rig, intr_512, front_pose)
    priors = depth_to_prior_normals(r.depth, intr_512)
    est = MultispectralPhotometricStereo(n_segments=2).fit(r.image, priors)
    normals = recover_normals(r.image, est.mixing_, est.mask_)
    labels = est.labels_
    details, ok = [], len(est.mixing_.matrices) == 2
    for lab, M in sorted(est.mixing_.matrices.items()):
        region = int(np.bincount(r.regions[labels == lab]).argmax())
        M0 = r.mixing[region]
        rel = float(np.linalg.norm(M - M0) / np.linalg.norm(M0))
        sel = normals.valid & ~r.shadow & (r.regions == region)
        err = angle_between_deg(normals.normals[sel], r.normals.normals[sel])
        med, p95 = float(np.median(err)), float(np.percentile(err, 95))
        ok &= rel <= 0.02 and med <= 2.0 and p95 <= 5.0
        details.append(f"region {region}: |dM|/|M| {rel:.2e}, median {med:.4f}, p95 {p95:.4f}")
    ok = acceptance_log(4, ok, "; ".join(details) + " (tol 2%, 2 deg, 5 deg)")
    assert ok


@pytest.fixture(scope="module")
def textured_bundle_dir(tmp_path_factory, textured_keyframe_512):
    return save_keyframes(tmp_path_factory.mktemp("bundle512"), [textured_keyframe_512])


def test_criterion_5_densification(acceptance_log, tmp_path, textured_bundle_dir):
    out = tmp_path / "run"
    report, _ = run_pipeline(PipelineConfig(str(textured_bundle_dir), str(out), compute_errors=False))
    assert report.error is None
    # recount from the emitted files only
    (b,) = read_bundle(textured_bundle_dir)
    inv = b.inverse_depth.values
    semi = int(np.count_nonzero(np.isfinite(inv) & (inv > 0)))
    fused = len(read_ply(out / "cloud_000000.ply"))
    ratio = fused / semi
    ok = acceptance_log(5, ratio >= 5.0, f"fused {fused} / semi-dense {semi} = {ratio:.2f}x (>= 5)")
    assert ok


def test_criterion_6_joint_optimization(acceptance_log, intr_512):
    n = np.array([0.2, -0.1, 1.0])
    n /= np.linalg.norm(n)
    d = 2.5
    z = plane_depth(intr_512.K, intr_512.shape, n, d)
    noisy = z * (1 + 0.01 * np.random.default_rng(6).normal(size=z.shape))
    P = backproject_grid(DepthMap(noisy), intr_512)
    normals = np.broadcast_to(-n, P.shape).copy()
    valid = np.ones(intr_512.shape, bool)
    surface = FusedSurface(P, normals, normals, valid, np.zeros_like(valid))
    cfg = FusionConfig(1.0, 3.0)
    cloud, info = joint_optimize(surface, cfg, return_info=True)

    def rmse(X):
        return float(np.sqrt(np.mean((X @ n - d) ** 2)))

    before, after = rmse(P.reshape(-1, 3)), rmse(cloud.positions)
    ok = acceptance_log(
        6,
        after <= 0.5 * before and info.objective_final <= info.objective_initial
        and info.iterations <= cfg.max_iter,
        f"RMSE {before:.4g} -> {after:.4g} (ratio {after / before:.3f} <= 0.5), objective "
        f"{info.objective_initial:.4g} -> {info.objective_final:.4g}, "
        f"{info.iterations} CG iterations (<= {cfg.max_iter})",
    )
    assert ok


def test_criterion_7_icp_recovery(acceptance_log):
    radius = 1.0
    src = sphere_points(2000, radius, seed=7)
    rng = np.random.default_rng(7)
    R0 = rodrigues(rng.normal(size=3), np.deg2rad(3.0))
    direction = rng.normal(size=3)
    t0 = 0.02 * (2 * radius) * direction / np.linalg.norm(direction)
    reg = icp_register(PointCloud(src), PointCloud(src @ R0.T + t0), IcpConfig())
    rot_err = rotation_angle_deg(reg.rotation.T @ R0)
    t_err = float(np.linalg.norm(reg.translation - t0) / np.linalg.norm(t0))
    monotone = all(b <= a for a, b in zip(reg.trace, reg.trace[1:]))
    ok = acceptance_log(
        7,
        rot_err <= 0.1 and t_err <= 0.01 and monotone,
        f"rotation error {rot_err:.2e} deg (<= 0.1), translation error {t_err:.2e} of |t| "
        f"(<= 1%), RMS trace non-increasing: {monotone}",
    )
    assert ok


def test_criterion_8_determinism(acceptance_log, tmp_path):
    bundle = tmp_path / "bundle"
    assert main(["synth", "--out", str(bundle), "--keyframes", "2", "--step", "20"]) == 0
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["reconstruct", str(bundle), "--out", str(out), "--no-timings"]) == 0
        runs.append(out)
    names = sorted(p.name for p in runs[0].iterdir() if p.suffix in (".ply", ".json"))
    same = [name for name in names if (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()]
    ok = acceptance_log(
        8,
        len(same) == len(names) and "global.ply" in names and "metrics.json" in names,
        f"{len(same)}/{len(names)} output files byte-identical ({', '.join(names)})",
    )
    assert ok


def test_criterion_9_keyframe_budget(acceptance_log, textured_keyframe_512):
    cfg = PipelineConfig(compute_errors=False)
    kfs = [textured_keyframe_512.bundle]
    run_pipeline(cfg, kfs)  # warm-up: imports and caches
    t0 = time.perf_counter()
    report, _ = run_pipeline(cfg, kfs)
    elapsed = time.perf_counter() - t0
    stages = report.keyframes[0]["timings_ms"]
    breakdown = ", ".join(f"{k} {v:.0f} ms" for k, v in stages.items() if k != "total")
    ok = acceptance_log(
        9,
        elapsed < KEYFRAME_BUDGET_S,
        f"one 512x512 keyframe in {elapsed:.2f} s (soft budget {KEYFRAME_BUDGET_S:.0f} s; "
        f"{breakdown})",
    )
    # soft criterion: logged and warned, never failed
    if not ok:
        warnings.warn(f"keyframe took {elapsed:.2f} s, over the {KEYFRAME_BUDGET_S} s budget")
