"""Command line entry point: ``mpsfusion {synth,reconstruct,evaluate,register}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, NormalMap
from .exceptions import InsufficientOverlap, MpsFusionError
from .icp import IcpConfig, icp_register, merge_clouds
from .io import read_bundle, read_ground_truth, read_pfm, read_ply, write_ply
from .pipeline import (
    MetricsReport,
    PipelineConfig,
    _jsonable,
    angular_errors,
    error_record,
    error_stats,
    position_rmse,
    run_pipeline,
)
from .synth import (
    DEFAULT_GRAD_THRESHOLD,
    LAYOUTS,
    SHAPES,
    LightRig,
    SceneSpec,
    generate_trajectory,
    make_keyframes,
    save_keyframes,
)

logger = logging.getLogger("mpsfusion")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _emit(obj, path=None) -> None:
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    albedo = tuple(args.albedo) if args.albedo else (
        ((0.8, 0.8, 0.8),) if args.layout == "uniform" else ((0.9, 0.5, 0.3), (0.3, 0.6, 0.9))
    )
    scene = SceneSpec(
        shape=args.shape,
        radius=args.radius,
        amplitude=args.amplitude,
        frequency=args.frequency,
        albedo=albedo,
        layout=args.layout,
        texture=args.texture,
        texture_frequency=args.texture_frequency,
    )
    rig = LightRig.default(args.slant)
    intr = CameraIntrinsics.from_fov(args.width, args.height, args.fov)
    poses = generate_trajectory(args.keyframes, args.orbit_radius, step_deg=args.step)
    kfs = make_keyframes(scene, rig, intr, poses, args.grad_threshold, args.noise, args.seed)
    out = save_keyframes(args.out, kfs, with_labels=args.labels)
    summary = {
        "bundle": str(out),
        "keyframes": len(kfs),
        "semi_dense_fraction": [
            float(np.mean(np.isfinite(k.bundle.inverse_depth.values))) for k in kfs
        ],
    }
    _emit(summary)
    return EXIT_OK


# -- reconstruct --------------------------------------------------------------

def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        bundle_dir=args.bundle,
        output_dir=args.out,
        n_segments=args.segments,
        min_segment_size=args.min_segment_size,
        shadow_threshold=args.shadow_threshold,
        condition_threshold=args.condition_threshold,
        trim_fraction=args.trim_fraction,
        prior_smoothing=args.prior_smoothing,
        use_labels=not args.ignore_labels,
        mixing_per_video=args.mixing_per_video,
        weight_position=args.weight_position,
        weight_normal=args.weight_normal,
        smoothing_radius=args.smoothing_radius,
        solver_tol=args.solver_tol,
        solver_max_iter=args.solver_max_iter,
        correct_bias=not args.no_bias_correction,
        icp_max_iter=args.icp_max_iter,
        icp_max_distance=args.icp_max_distance,
        icp_trim=args.icp_trim,
        icp_min_fitness=args.icp_min_fitness,
        voxel=args.voxel,
        seed=args.seed,
        compute_errors=not args.no_errors,
        record_timings=not args.no_timings,
    )


def cmd_reconstruct(args) -> int:
    out = Path(args.out)
    try:
        cfg = _pipeline_config(args)
    except ValueError as exc:
        out.mkdir(parents=True, exist_ok=True)
        rec = {"code": "invalid_config", "type": "ValueError", "message": str(exc)}
        MetricsReport(error=rec).write(out / "metrics.json")
        logger.error("%s", exc)
        return EXIT_USAGE
    try:
        report, _ = run_pipeline(cfg)
    except MpsFusionError as exc:
        logger.error("reconstruction failed: %s", exc)
        return EXIT_FAILED
    agg = report.aggregate
    logger.info(
        "%d keyframes, %d fused points, global cloud %d points, density ratio %.2f",
        agg["keyframes"], agg["fused_points"], agg["global_points"], agg["density_ratio"],
    )
    return EXIT_FAILED if report.error is not None else EXIT_OK


# -- evaluate -----------------------------------------------------------------

def _evaluate_run(run_dir: Path, bundle_dir: Path) -> dict:
    """Recompute metrics for a reconstruction directory from the files alone."""
    bundles = {b.keyframe_id: b for b in read_bundle(bundle_dir)}
    records = []
    n_semi = n_fused = 0
    for kf_id, b in sorted(bundles.items()):
        ply = run_dir / f"cloud_{kf_id:06d}.ply"
        if not ply.is_file():
            records.append({"keyframe": kf_id, "status": "missing"})
            continue
        cloud = read_ply(ply)
        semi = int(np.count_nonzero(np.isfinite(b.inverse_depth.values)
                                    & (b.inverse_depth.values > 1e-9)))
        rec = {
            "keyframe": kf_id,
            "semi_dense_points": semi,
            "fused_points": len(cloud),
            "density_ratio": len(cloud) / semi if semi else 0.0,
        }
        n_semi += semi
        n_fused += len(cloud)
        gt = read_ground_truth(bundle_dir, kf_id)
        normals_path = run_dir / f"normals_{kf_id:06d}.pfm"
        if gt is not None:
            if "normals" in gt and normals_path.is_file():
                mask = ~gt["shadow"] if "shadow" in gt else None
                stats = error_stats(angular_errors(
                    NormalMap(read_pfm(normals_path)), NormalMap(gt["normals"]), mask
                ))
                rec.update({f"normal_error_{k}": v for k, v in stats.items()})
            depth = gt["depth"]
            ok = np.isfinite(depth) & (depth > 0)
            rays = b.intrinsics.pixel_rays()[ok] * depth[ok][:, None]
            rec["position_rmse"] = position_rmse(cloud, b.pose.rigid().apply(rays), 20000)
        records.append(rec)
    agg = {
        "keyframes": len(bundles),
        "semi_dense_points": n_semi,
        "fused_points": n_fused,
        "density_ratio": n_fused / n_semi if n_semi else 0.0,
    }
    return {"keyframes": records, "aggregate": agg}


def cmd_evaluate(args) -> int:
    try:
        if args.normals is not None:
            if args.reference is None:
                raise ValueError("--normals needs --reference")
            errs = angular_errors(NormalMap(read_pfm(args.normals)),
                                  NormalMap(read_pfm(args.reference)))
            result = {f"normal_error_{k}": v for k, v in error_stats(errs).items()}
        elif args.cloud is not None:
            if args.reference is None:
                raise ValueError("--cloud needs --reference")
            result = {"position_rmse": position_rmse(read_ply(args.cloud), read_ply(args.reference))}
        else:
            if args.run is None or args.bundle is None:
                raise ValueError("give --run and --bundle, or --normals/--cloud with --reference")
            result = _evaluate_run(Path(args.run), Path(args.bundle))
    except MpsFusionError as exc:
        _emit({"error": error_record(exc)}, args.out)
        return EXIT_FAILED
    _emit(result, args.out)
    return EXIT_OK


# -- register -----------------------------------------------------------------

def cmd_register(args) -> int:
    source = read_ply(args.source)
    target = read_ply(args.target)
    cfg = IcpConfig(args.max_iter, args.tol, args.max_distance, args.trim, args.min_fitness)
    try:
        reg = icp_register(source, target, cfg)
    except InsufficientOverlap as exc:
        rec = {"error": error_record(exc)}
        if exc.registration is not None:
            rec["fitness"] = exc.registration.fitness
        _emit(rec, args.report)
        return EXIT_FAILED
    except MpsFusionError as exc:
        _emit({"error": error_record(exc)}, args.report)
        return EXIT_FAILED
    result = {
        "rotation": reg.rotation,
        "translation": reg.translation,
        "fitness": reg.fitness,
        "rms": reg.rms,
        "iterations": reg.iterations,
        "rms_trace": list(reg.trace),
    }
    if args.out:
        write_ply(args.out, reg.transform_cloud(source))
    if args.merge:
        merged = merge_clouds(target, source, reg, args.voxel)
        write_ply(args.merge, merged)
        result["merged_points"] = len(merged)
    _emit(result, args.report)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mpsfusion",
        description="Densify semi-dense SLAM keyframes with multispectral photometric stereo.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic keyframe bundle with ground truth")
    s.add_argument("--out", required=True, help="bundle directory to create")
    s.add_argument("--shape", choices=SHAPES, default="sphere")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--amplitude", type=float, default=0.05, help="heightfield amplitude")
    s.add_argument("--frequency", type=float, default=1.0, help="heightfield frequency")
    s.add_argument("--layout", choices=LAYOUTS, default="uniform")
    s.add_argument("--albedo", type=_triple, action="append",
                   help="r,g,b albedo of a region; repeat once per region")
    s.add_argument("--texture", type=float, default=0.3, help="achromatic texture contrast")
    s.add_argument("--texture-frequency", type=float, default=12.0)
    s.add_argument("--keyframes", type=int, default=1)
    s.add_argument("--orbit-radius", type=float, default=3.0)
    s.add_argument("--step", type=float, default=None, help="orbit step in degrees")
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--fov", type=float, default=40.0, help="horizontal field of view, degrees")
    s.add_argument("--slant", type=float, default=40.0, help="light slant off the optical axis")
    s.add_argument("--grad-threshold", type=float, default=DEFAULT_GRAD_THRESHOLD)
    s.add_argument("--noise", type=float, default=0.01,
                   help="inverse-depth noise relative to the mean inverse depth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labels", action="store_true", help="also write true region labels")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="run the full pipeline on a bundle")
    r.add_argument("bundle", help="keyframe bundle directory")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--segments", type=int, default=1, help="chromaticity clusters per keyframe")
    r.add_argument("--min-segment-size", type=int, default=100)
    r.add_argument("--shadow-threshold", type=float, default=None)
    r.add_argument("--condition-threshold", type=float, default=1e6)
    r.add_argument("--trim-fraction", type=float, default=0.2)
    r.add_argument("--prior-smoothing", type=float, default=5.0)
    r.add_argument("--ignore-labels", action="store_true", help="segment even if labels exist")
    r.add_argument("--mixing-per-video", action="store_true",
                   help="fit mixing matrices on the first keyframe only")
    r.add_argument("--weight-position", type=float, default=1.0)
    r.add_argument("--weight-normal", type=float, default=3.0)
    r.add_argument("--smoothing-radius", type=int, default=7)
    r.add_argument("--solver-tol", type=float, default=1e-8)
    r.add_argument("--solver-max-iter", type=int, default=2000)
    r.add_argument("--no-bias-correction", action="store_true")
    r.add_argument("--icp-max-iter", type=int, default=50)
    r.add_argument("--icp-max-distance", type=float, default=None)
    r.add_argument("--icp-trim", type=float, default=0.1)
    r.add_argument("--icp-min-fitness", type=float, default=0.3)
    r.add_argument("--voxel", type=float, default=None, help="merge voxel size (default: auto)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--no-errors", action="store_true", help="skip ground-truth metrics")
    r.add_argument("--no-timings", action="store_true", help="omit timings from metrics.json")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score a reconstruction against ground truth")
    e.add_argument("--run", help="reconstruction output directory")
    e.add_argument("--bundle", help="bundle directory holding gt/")
    e.add_argument("--normals", help="normal map (PFM) to score")
    e.add_argument("--cloud", help="point cloud (PLY) to score")
    e.add_argument("--reference", help="reference normal map or cloud")
    e.add_argument("--out", help="write the report here instead of stdout")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("register", help="align one PLY cloud onto another with ICP")
    g.add_argument("source")
    g.add_argument("target")
    g.add_argument("--out", help="write the aligned source cloud")
    g.add_argument("--merge", help="write the merged cloud")
    g.add_argument("--voxel", type=float, default=None)
    g.add_argument("--max-iter", type=int, default=50)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--max-distance", type=float, default=None)
    g.add_argument("--trim", type=float, default=0.1)
    g.add_argument("--min-fitness", type=float, default=0.3)
    g.add_argument("--report", help="write the registration report here instead of stdout")
    g.set_defaults(func=cmd_register)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValueError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
