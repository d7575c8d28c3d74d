"""End-to-end reconstruction over a keyframe bundle, and evaluation metrics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import DepthMap, NormalMap, PointCloud
from .exceptions import (
    DimensionMismatch,
    InputValidationError,
    InsufficientOverlap,
    InsufficientPriors,
    MpsFusionError,
)
from .fusion import (
    PositionNormalFusion,
    associate_normals,
    densify,
    transform_cloud_to_keyframe,
)
from .icp import IcpConfig, Registration, icp_register, merge_clouds
from .ingest import (
    KeyframeBundle,
    backproject,
    backproject_grid,
    depth_to_prior_normals,
    fill_holes_bilinear,
    invdepth_to_depth,
    rescale_depth,
)
from .io import read_bundle, read_ground_truth, write_pfm, write_ply
from .mps import MultispectralPhotometricStereo, recover_normals

logger = logging.getLogger(__name__)

# soft per-keyframe budget, seconds
KEYFRAME_BUDGET_S = 2.0
RECONSTRUCTION_STAGES = ("ingest", "mps", "fusion", "registration")
# points per keyframe used for the position error
RMSE_SAMPLE_POINTS = 20000


@dataclass
class PipelineConfig:
    """Everything a reconstruction run depends on.

    ``prior_smoothing`` is the Gaussian sigma (pixels) applied to the
    hole-filled depth before prior normals are taken; ``trim_fraction`` is
    the share of worst-fitting priors dropped when fitting mixing matrices.
    ``mixing_per_video`` reuses the first keyframe's mixing matrices for
    all later keyframes instead of refitting per keyframe.
    ``register_sampled_only`` registers each keyframe through its
    SLAM-sampled points (measured positions) rather than all fused points,
    whose densified positions carry interpolation error.
    """

    bundle_dir: str | None = None
    output_dir: str | None = None
    # mps
    n_segments: int = 1
    min_segment_size: int = 100
    shadow_threshold: float | None = None
    condition_threshold: float = 1e6
    trim_fraction: float = 0.2
    refine_iterations: int = 30
    prior_smoothing: float = 5.0
    use_labels: bool = True
    mixing_per_video: bool = False
    # fusion
    weight_position: float = 1.0
    weight_normal: float = 3.0
    smoothing_radius: int = 7
    solver_tol: float = 1e-8
    solver_max_iter: int = 2000
    correct_bias: bool = True
    # registration
    icp_max_iter: int = 50
    icp_tol: float = 1e-6
    icp_max_distance: float | None = None
    icp_trim: float = 0.1
    icp_min_fitness: float = 0.3
    icp_degeneracy_threshold: float | None = 0.1
    register_sampled_only: bool = True
    voxel: float | None = None
    # run
    seed: int = 0
    compute_errors: bool = True
    record_timings: bool = True

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be at least 1")
        if self.prior_smoothing < 0:
            raise ValueError("prior_smoothing must be non-negative")
        if self.voxel is not None and not self.voxel > 0:
            raise ValueError("voxel must be positive")
        # surface the module invariants early
        self.icp_config()
        self.fusion_estimator()._config()

    def icp_config(self) -> IcpConfig:
        return IcpConfig(
            self.icp_max_iter, self.icp_tol, self.icp_max_distance, self.icp_trim,
            self.icp_min_fitness, self.icp_degeneracy_threshold,
        )

    def mps_estimator(self) -> MultispectralPhotometricStereo:
        return MultispectralPhotometricStereo(
            n_segments=self.n_segments,
            min_segment_size=self.min_segment_size,
            shadow_threshold=self.shadow_threshold,
            condition_threshold=self.condition_threshold,
            trim_fraction=self.trim_fraction,
            refine_iterations=self.refine_iterations,
            random_state=self.seed,
        )

    def fusion_estimator(self) -> PositionNormalFusion:
        return PositionNormalFusion(
            self.weight_position, self.weight_normal, self.smoothing_radius,
            self.solver_tol, self.solver_max_iter, self.correct_bias,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    keyframes: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    error: dict | None = None

    def to_dict(self, include_timings: bool = True) -> dict:
        kfs = [dict(k) for k in self.keyframes]
        agg = dict(self.aggregate)
        if not include_timings:
            for k in kfs:
                k.pop("timings_ms", None)
            agg.pop("timings_ms", None)
        out = {"keyframes": kfs, "aggregate": agg}
        if self.error is not None:
            out["error"] = self.error
        return out

    def write(self, path, include_timings: bool = True) -> None:
        text = json.dumps(_jsonable(self.to_dict(include_timings)), indent=2, sort_keys=True)
        Path(path).write_text(text + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def error_record(exc: BaseException, keyframe_id: int | None = None) -> dict:
    rec = {"code": getattr(exc, "code", "error"), "type": type(exc).__name__, "message": str(exc)}
    if keyframe_id is not None:
        rec["keyframe"] = keyframe_id
    return rec


# -- evaluation -------------------------------------------------------------

def angular_errors(pred, reference, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between two normal maps (valid in both, and ``mask``)."""
    p = pred if isinstance(pred, NormalMap) else NormalMap(np.asarray(pred, dtype=np.float64))
    r = reference if isinstance(reference, NormalMap) else NormalMap(
        np.asarray(reference, dtype=np.float64)
    )
    if p.shape != r.shape:
        raise DimensionMismatch(f"normal maps {p.shape} and {r.shape} differ in size")
    sel = p.valid & r.valid
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != p.shape:
            raise DimensionMismatch(f"mask {mask.shape} does not match {p.shape}")
        sel &= mask
    dots = np.einsum("ij,ij->i", p.normals[sel], r.normals[sel])
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def error_stats(errors) -> dict:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return {"count": 0, "mean": None, "median": None, "p95": None}
    return {
        "count": int(e.size),
        "mean": float(e.mean()),
        "median": float(np.median(e)),
        "p95": float(np.percentile(e, 95)),
    }


def position_rmse(points, reference_points, max_points: int | None = None) -> float:
    """RMS distance from each point to its nearest reference point.

    With ``max_points`` the RMS is taken over an evenly strided subset of at
    most that many points, which bounds the cost of the neighbour queries.
    """
    P = points.positions if isinstance(points, PointCloud) else np.asarray(points, float)
    Q = reference_points.positions if isinstance(reference_points, PointCloud) else np.asarray(
        reference_points, float
    )
    if P.ndim != 2 or Q.ndim != 2 or P.shape[1] != 3 or Q.shape[1] != 3:
        raise DimensionMismatch("point sets must be (N, 3) arrays")
    if len(P) == 0 or len(Q) == 0:
        return float("nan")
    if max_points is not None and len(P) > max_points:
        P = P[:: int(np.ceil(len(P) / max_points))]
    d, _ = cKDTree(Q).query(P)
    return float(np.sqrt(np.mean(d**2)))


def evaluate(prediction, ground_truth, mask=None) -> MetricsReport:
    """Compare a normal map or a point cloud with its ground truth."""
    if isinstance(prediction, (PointCloud,)) or (
        isinstance(prediction, np.ndarray) and prediction.ndim == 2
    ):
        rec = {"position_rmse": position_rmse(prediction, ground_truth)}
    else:
        stats = error_stats(angular_errors(prediction, ground_truth, mask))
        rec = {f"normal_error_{k}": v for k, v in stats.items() if k != "count"}
        rec["normal_error_count"] = stats["count"]
    return MetricsReport([rec], dict(rec))


# -- reconstruction ---------------------------------------------------------

@dataclass
class KeyframeResult:
    keyframe_id: int
    cloud: PointCloud | None = None
    normals: NormalMap | None = None
    sampled: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)
    error: dict | None = None


class _Timer:
    def __init__(self):
        self.times = {}

    def __call__(self, name):
        timer = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + 1e3 * (
                    time.perf_counter() - self.t0
                )
                return False

        return _Span()


def _gt_metrics(kf: KeyframeBundle, normals: NormalMap, cloud_world: PointCloud, gt: dict) -> dict:
    out = {}
    if "normals" in gt:
        gt_n = NormalMap(gt["normals"])
        mask = ~gt["shadow"] if "shadow" in gt else None
        stats = error_stats(angular_errors(normals, gt_n, mask))
        out.update({f"normal_error_{k}": v for k, v in stats.items()})
    depth = np.asarray(gt["depth"])
    gt_depth = DepthMap(np.where(np.isfinite(depth) & (depth > 0), depth, 0.0))
    gt_pts = kf.pose.rigid().apply(backproject_grid(gt_depth, kf.intrinsics)[gt_depth.valid])
    out["position_rmse"] = position_rmse(cloud_world, gt_pts, RMSE_SAMPLE_POINTS)
    return out


def process_keyframe(
    kf: KeyframeBundle,
    cfg: PipelineConfig,
    ground_truth: dict | None = None,
    mixing_source: MultispectralPhotometricStereo | None = None,
) -> tuple[KeyframeResult, MultispectralPhotometricStereo | None]:
    """Ingest, MPS and fusion for one keyframe; returns the fused world-frame cloud.

    Module errors are caught and recorded on the result instead of raised.
    """
    timer = _Timer()
    res = KeyframeResult(kf.keyframe_id)
    est = None
    try:
        with timer("ingest"):
            depth = rescale_depth(invdepth_to_depth(kf.inverse_depth), kf.scale)
            n_semi = int(np.count_nonzero(depth.valid))
            res.metrics["semi_dense_points"] = n_semi
            filled = fill_holes_bilinear(depth)
            priors = depth_to_prior_normals(filled, kf.intrinsics, cfg.prior_smoothing)
            rigid = kf.pose.rigid()
            semi = backproject(depth, kf.intrinsics, rigid, kf.image, kf.keyframe_id)

        with timer("mps"):
            labels = kf.labels if cfg.use_labels else None
            if mixing_source is not None:
                est = mixing_source
                normals = est.predict(kf.image, labels=labels)
            else:
                est = cfg.mps_estimator().fit(
                    kf.image, priors, labels=labels, interpolated=filled.interpolated
                )
                model = est.mixing_
                if not model.matrices:
                    # nothing could be modeled: surface the first segment's reason
                    if model.failures:
                        raise next(iter(model.failures.values()))
                    raise InsufficientPriors("no unshadowed pixel to estimate mixing from")
                normals = recover_normals(kf.image, model, est.mask_)
            res.normals = normals
            res.metrics["segments"] = len(est.mixing_.matrices)
            res.metrics["segment_failures"] = {
                str(k): error_record(v) for k, v in sorted(est.mixing_.failures.items())
            }
            res.metrics["mixing_condition"] = {
                str(k): float(v) for k, v in sorted(est.mixing_.conditions.items())
            }

        with timer("fusion"):
            cloud_cam = transform_cloud_to_keyframe(semi, rigid)
            associated = associate_normals(cloud_cam, normals, kf.intrinsics)
            peak = kf.image.data.max()
            colors = kf.image.data / peak if peak > 0 else kf.image.data
            surface = densify(cloud_cam, filled, normals, kf.intrinsics, colors)
            fusion = cfg.fusion_estimator().fit(surface)
            fused_cam = fusion.cloud_
            fused = PointCloud(
                fused_cam.positions, fused_cam.normals, fused_cam.has_normal,
                fused_cam.colors, kf.keyframe_id,
            ).transformed(rigid)
            res.cloud = fused
            res.sampled = fusion.surface_.sampled[fusion.surface_.valid]
            res.metrics.update(
                associated_points=int(np.count_nonzero(associated.has_normal)),
                sampled_pixels=surface.n_sampled,
                densified_pixels=surface.n_densified,
                fused_points=len(fused),
                density_ratio=len(fused) / n_semi if n_semi else 0.0,
                solver_iterations=fusion.n_iter_,
                solver_residual=fusion.residual_,
                objective_initial=fusion.objective_initial_,
                objective_final=fusion.objective_,
            )

        if cfg.compute_errors and ground_truth is not None:
            with timer("evaluate"):
                res.metrics.update(_gt_metrics(kf, normals, fused, ground_truth))
    except MpsFusionError as exc:
        res.error = error_record(exc, kf.keyframe_id)
        logger.warning("keyframe %d failed: %s", kf.keyframe_id, exc)
    res.metrics["timings_ms"] = timer.times
    return res, est


def _register_and_merge(global_cloud, anchors, res, cfg, record, timer):
    """Register a fused keyframe cloud on the global cloud and merge it.

    ``anchors`` accumulates the registered SLAM-sampled points; returns the
    updated global and anchor clouds.
    """
    fused = res.cloud
    own = fused.subset(np.nonzero(res.sampled)[0]) if cfg.register_sampled_only else fused
    if len(global_cloud) == 0:
        return fused, own
    source, target = (own, anchors) if cfg.register_sampled_only and len(own) >= 3 else (
        fused, global_cloud
    )
    with timer("registration"):
        try:
            reg = icp_register(source, target, cfg.icp_config())
        except InsufficientOverlap as exc:
            record["registration"] = _reg_record(exc.registration)
            record["merge_error"] = error_record(exc)
            return global_cloud, anchors
        record["registration"] = _reg_record(reg)
        merged = merge_clouds(global_cloud, fused, reg, cfg.voxel)
        anchors = merge_clouds(anchors, own, reg, cfg.voxel) if len(own) else anchors
    return merged, anchors


def _reg_record(reg: Registration | None) -> dict | None:
    if reg is None:
        return None
    return {
        "rotation": reg.rotation,
        "translation": reg.translation,
        "fitness": reg.fitness,
        "rms": reg.rms,
        "iterations": reg.iterations,
        "degenerate_dims": reg.degenerate_dims,
    }


def run_pipeline(cfg: PipelineConfig, keyframes=None) -> tuple[MetricsReport, PointCloud]:
    """Reconstruct every keyframe in order and merge into one global cloud.

    ``keyframes`` may be passed in memory; otherwise the bundle directory is
    read.  When ``cfg.output_dir`` is set, ``cloud_%06d.ply``,
    ``normals_%06d.pfm``, ``global.ply`` and ``metrics.json`` are written.
    Failures of single keyframes are recorded and skipped; a failure that
    prevents the run (bad input) is recorded in the report and re-raised.
    """
    out = Path(cfg.output_dir) if cfg.output_dir else None
    report = MetricsReport()
    try:
        if keyframes is None:
            if cfg.bundle_dir is None:
                raise InputValidationError("no bundle directory given")
            keyframes = read_bundle(cfg.bundle_dir)
        if not keyframes:
            raise InputValidationError("bundle holds no keyframes")
    except MpsFusionError as exc:
        report.error = error_record(exc)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            report.write(out / "metrics.json", cfg.record_timings)
        raise
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    global_cloud = PointCloud.empty()
    anchors = PointCloud.empty()
    mixing_source = None
    n_semi = n_fused = 0
    failed = []
    t_run = time.perf_counter()
    for kf in keyframes:
        t0 = time.perf_counter()
        gt = None
        if cfg.compute_errors and cfg.bundle_dir is not None:
            gt = read_ground_truth(cfg.bundle_dir, kf.keyframe_id)
        res, est = process_keyframe(kf, cfg, gt, mixing_source)
        if cfg.mixing_per_video and mixing_source is None and res.error is None:
            mixing_source = est
        record = {"keyframe": kf.keyframe_id, "status": "ok" if res.error is None else "failed"}
        record.update(res.metrics)
        timer = _Timer()
        timer.times = dict(res.metrics["timings_ms"])
        if res.error is not None:
            record["error"] = res.error
            failed.append(kf.keyframe_id)
        else:
            n_semi += res.metrics["semi_dense_points"]
            n_fused += len(res.cloud)
            global_cloud, anchors = _register_and_merge(
                global_cloud, anchors, res, cfg, record, timer
            )
            if out is not None:
                with timer("write"):
                    write_ply(out / f"cloud_{kf.keyframe_id:06d}.ply", res.cloud)
                    write_pfm(out / f"normals_{kf.keyframe_id:06d}.pfm", res.normals.normals)
        timer.times["total"] = 1e3 * (time.perf_counter() - t0)
        record["timings_ms"] = timer.times
        # file output and error evaluation are not part of the reconstruction budget
        spent = sum(timer.times.get(k, 0.0) for k in RECONSTRUCTION_STAGES)
        if spent > 1e3 * KEYFRAME_BUDGET_S:
            logger.warning(
                "keyframe %d took %.0f ms (budget %.0f ms)",
                kf.keyframe_id, spent, 1e3 * KEYFRAME_BUDGET_S,
            )
        report.keyframes.append(record)

    errs = [r["normal_error_median"] for r in report.keyframes
            if r.get("normal_error_median") is not None]
    rmses = [r["position_rmse"] for r in report.keyframes if r.get("position_rmse") is not None]
    report.aggregate = {
        "keyframes": len(keyframes),
        "failed_keyframes": failed,
        "semi_dense_points": n_semi,
        "fused_points": n_fused,
        "global_points": len(global_cloud),
        "density_ratio": n_fused / n_semi if n_semi else 0.0,
        "normal_error_median_mean": float(np.mean(errs)) if errs else None,
        "position_rmse_mean": float(np.mean(rmses)) if rmses else None,
        "timings_ms": {"total": 1e3 * (time.perf_counter() - t_run)},
    }
    if len(failed) == len(keyframes):
        report.error = {
            "code": "all_keyframes_failed",
            "type": "MpsFusionError",
            "message": f"all {len(keyframes)} keyframes failed",
        }
    if out is not None:
        if len(global_cloud):
            write_ply(out / "global.ply", global_cloud)
        report.write(out / "metrics.json", cfg.record_timings)
    return report, global_cloud
