"""Fusion of a semi-dense keyframe cloud with a dense normal map.

The pipeline is: bring the cloud into the keyframe camera frame, attach
normals by reprojection, fill the unsampled pixels from the hole-filled depth,
remove the low-frequency bias of the measured normals using the positions, and
finally solve a sparse linear least-squares problem that trades fidelity to
the measured positions against agreement of grid tangents with the corrected
normals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._grid import box_smooth, grid_normals
from ._validation import check_depth_map, check_normal_map
from .core import CameraIntrinsics, CameraPose, DepthMap, NormalMap, PointCloud, pose_inverse
from .exceptions import EmptyInput, SolverDiverged
from .ingest import backproject_grid


@dataclass(frozen=True)
class FusionConfig:
    """Weights are read as position:normal (default 1:3)."""

    weight_position: float = 1.0
    weight_normal: float = 3.0
    smoothing_radius: int = 7
    tol: float = 1e-8
    max_iter: int = 2000

    def __post_init__(self):
        if not self.weight_position > 0:
            raise ValueError("position weight must be positive")
        if not self.weight_normal >= 0:
            raise ValueError("normal weight must be non-negative")
        if self.smoothing_radius < 1:
            raise ValueError("smoothing radius must be at least 1 pixel")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("solver tolerance and iteration budget must be positive")


@dataclass(frozen=True)
class FusedSurface:
    """Per-pixel fusion state of one keyframe (camera frame).

    ``positions`` are the measured positions (SLAM samples where ``sampled``,
    hole-filled depth elsewhere) and serve as the optimization targets.
    """

    positions: np.ndarray
    measured_normals: np.ndarray
    corrected_normals: np.ndarray
    valid: np.ndarray
    sampled: np.ndarray
    colors: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def n_sampled(self) -> int:
        return int(np.count_nonzero(self.valid & self.sampled))

    @property
    def n_densified(self) -> int:
        return int(np.count_nonzero(self.valid & ~self.sampled))


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float
    objective_initial: float
    objective_final: float


def transform_cloud_to_keyframe(cloud: PointCloud, pose: CameraPose) -> PointCloud:
    """World-frame cloud into the camera frame of the keyframe at ``pose``."""
    return cloud.transformed(pose_inverse(pose))


def _project_to_pixels(positions, intr: CameraIntrinsics):
    u, v = intr.project(positions)
    front = positions[:, 2] > 0
    ui = np.full(len(positions), -1, np.int64)
    vi = np.full(len(positions), -1, np.int64)
    ui[front] = np.rint(u[front]).astype(np.int64)
    vi[front] = np.rint(v[front]).astype(np.int64)
    inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    resid = np.full(len(positions), np.inf)
    resid[inside] = np.hypot(u[inside] - ui[inside], v[inside] - vi[inside])
    return ui, vi, inside, resid


def associate_normals(
    cloud_cam: PointCloud, normals: NormalMap, intr: CameraIntrinsics
) -> PointCloud:
    """Attach the normal of the pixel each point projects to (nearest pixel).

    Points behind the camera, outside the image or on invalid normal pixels
    are left without a normal.
    """
    normals = check_normal_map(normals, intr.shape)
    P = cloud_cam.positions
    ui, vi, inside, _ = _project_to_pixels(P, intr)
    ok = inside.copy()
    ok[inside] = normals.valid[vi[inside], ui[inside]]
    nrm = np.zeros_like(P)
    nrm[ok] = normals.normals[vi[ok], ui[ok]]
    return PointCloud(P, nrm, ok, cloud_cam.colors, cloud_cam.keyframe)


def densify(
    cloud_cam: PointCloud,
    dense_depth: DepthMap,
    normals: NormalMap,
    intr: CameraIntrinsics,
    colors: np.ndarray | None = None,
) -> FusedSurface:
    """Grid every pixel with a valid measured normal.

    A pixel hit by a cloud point takes that point's position (on collision the
    point with the smallest reprojection residual wins, ties by index); other
    pixels take the backprojected hole-filled depth.
    """
    dense_depth = check_depth_map(dense_depth, intr.shape)
    normals = check_normal_map(normals, intr.shape)
    if len(cloud_cam) == 0 and not dense_depth.valid.any():
        raise EmptyInput("nothing to densify: empty cloud and empty depth map")

    H, W = intr.shape
    positions = backproject_grid(dense_depth, intr)
    sampled = np.zeros((H, W), bool)
    if len(cloud_cam):
        P = cloud_cam.positions
        ui, vi, inside, resid = _project_to_pixels(P, intr)
        idx = np.nonzero(inside)[0]
        pix = vi[idx] * W + ui[idx]
        order = np.lexsort((idx, resid[idx], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winners = idx[order[first]]
        wp = pix_sorted[first]
        positions.reshape(-1, 3)[wp] = P[winners]
        sampled.reshape(-1)[wp] = True

    valid = normals.valid & (sampled | dense_depth.valid)
    positions = np.where(valid[..., None], positions, 0.0)
    measured = np.where(valid[..., None], normals.normals, 0.0)
    return FusedSurface(positions, measured, measured.copy(), valid, sampled & valid, colors)


def _rotate_between(a, b, x):
    """Apply per-pixel minimal rotations taking unit ``a`` onto unit ``b`` to ``x``."""
    v = np.cross(a, b)
    c = np.einsum("...k,...k->...", a, b)
    ok = c > -1 + 1e-9
    k = np.where(ok, 1.0 / np.where(ok, 1.0 + c, 1.0), 0.0)
    vx = np.cross(v, x)
    vdotx = np.einsum("...k,...k->...", v, x)
    out = x * c[..., None] + vx + v * (vdotx * k)[..., None]
    return out, ok


def _smooth_unit(normals, valid, radius):
    out, ok = box_smooth(normals, valid, radius)
    length = np.linalg.norm(out, axis=-1)
    ok &= length > 1e-9
    return out / np.where(ok, length, 1.0)[..., None], ok


def correct_normal_bias(surface: FusedSurface, cfg: FusionConfig | None = None) -> FusedSurface:
    """Rotate measured normals so their low-pass field matches the positions'.

    Both the position grid and the measured normal field are box-filtered
    with ``cfg.smoothing_radius``; the normal of the smoothed positions (tangents
    taken over the same radius, then smoothed again) and
    the smoothed measured normal define a per-pixel rotation that is applied
    to the unsmoothed measured normal.  Pixels where either field is
    degenerate become invalid.
    """
    cfg = cfg or FusionConfig()
    valid = surface.valid
    if not valid.any():
        return surface
    P_s, ok_p = box_smooth(surface.positions, valid, cfg.smoothing_radius)
    n_pos, ok_n = grid_normals(P_s, ok_p, strict=False, step=cfg.smoothing_radius)
    n_pos, ok_n = _smooth_unit(n_pos, ok_n, cfg.smoothing_radius)
    N_s, ok_m = _smooth_unit(surface.measured_normals, valid, cfg.smoothing_radius)

    rotated, ok_r = _rotate_between(N_s, n_pos, surface.measured_normals)
    ok = valid & ok_n & ok_m & ok_r
    length = np.linalg.norm(rotated, axis=-1)
    ok &= length > 1e-12
    corrected = np.where(ok[..., None], rotated / np.where(ok, length, 1.0)[..., None], 0.0)
    return replace(surface, corrected_normals=corrected, valid=ok, sampled=surface.sampled & ok)


def _grid_index(valid):
    idx = np.full(valid.shape, -1, np.int64)
    idx[valid] = np.arange(np.count_nonzero(valid))
    return idx


def _tangent_operator(surface: FusedSurface):
    """Sparse ``(E, 3N)`` matrix whose rows are ``n_i . (p_j - p_i)`` for
    right and down grid neighbours ``j`` of each valid pixel ``i``."""
    valid = surface.valid
    idx = _grid_index(valid)
    n_var = 3 * np.count_nonzero(valid)
    rows, cols, vals = [], [], []
    n_edges = 0
    for di, dj in ((0, 1), (1, 0)):
        a = idx[: idx.shape[0] - di, : idx.shape[1] - dj]
        b = idx[di:, dj:]
        both = (a >= 0) & (b >= 0)
        i = a[both]
        j = b[both]
        nrm = surface.corrected_normals[: idx.shape[0] - di, : idx.shape[1] - dj][both]
        e = n_edges + np.arange(len(i))
        for c in range(3):
            rows += [e, e]
            cols += [3 * j + c, 3 * i + c]
            vals += [nrm[:, c], -nrm[:, c]]
        n_edges += len(i)
    if n_edges == 0:
        return sp.csr_matrix((0, n_var))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_edges, n_var),
    )


def fusion_objective(surface: FusedSurface, positions, cfg: FusionConfig | None = None) -> float:
    """``w_p * sum |p - p_meas|^2 + w_n * sum (tangent . n_corr)^2`` over valid pixels.

    ``positions`` is either an ``(H, W, 3)`` grid or an ``(N, 3)`` array in
    raster order of the valid pixels.
    """
    cfg = cfg or FusionConfig()
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim == 3:
        x = x[surface.valid]
    m = surface.positions[surface.valid]
    T = _tangent_operator(surface)
    t = T @ x.reshape(-1)
    return float(cfg.weight_position * np.sum((x - m) ** 2) + cfg.weight_normal * np.sum(t**2))


def _solve(surface: FusedSurface, cfg: FusionConfig):
    m = surface.positions[surface.valid].reshape(-1)
    T = _tangent_operator(surface)
    Tt = T.T.tocsr()
    wp, wn = cfg.weight_position, cfg.weight_normal
    # matrix-free normal equations: Q = wp I + wn T'T
    Q = LinearOperator(
        (len(m), len(m)), matvec=lambda x: wp * x + wn * (Tt @ (T @ x)), dtype=np.float64
    )
    b = wp * m
    diag = wp + wn * np.asarray(T.multiply(T).sum(axis=0)).ravel()
    precond = LinearOperator(Q.shape, matvec=lambda r: r / diag, dtype=np.float64)

    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    bnorm = np.linalg.norm(b)
    if bnorm == 0 or np.linalg.norm(b - Q @ m) <= cfg.tol * bnorm:
        x, info = m.copy(), 0
    else:
        x, info = cg(Q, b, x0=m, rtol=cfg.tol, atol=0.0, maxiter=cfg.max_iter, M=precond,
                     callback=count)
    residual = float(np.linalg.norm(b - Q @ x) / bnorm) if bnorm > 0 else 0.0
    if info != 0 or not np.all(np.isfinite(x)):
        raise SolverDiverged(
            f"conjugate gradient stopped at relative residual {residual:.3g} "
            f"after {iterations} iterations (tolerance {cfg.tol:g})"
        )
    obj0 = cfg.weight_normal * float(np.sum((T @ m) ** 2))
    obj1 = cfg.weight_position * float(np.sum((x - m) ** 2)) + cfg.weight_normal * float(
        np.sum((T @ x) ** 2)
    )
    return x.reshape(-1, 3), SolveInfo(iterations, residual, obj0, obj1)


def joint_optimize(
    surface: FusedSurface, cfg: FusionConfig | None = None, return_info: bool = False
):
    """Solve for final positions; one output point per valid pixel.

    The unknowns are all three coordinates of every valid pixel.  The normal
    equations of the weighted least-squares problem are solved with
    Jacobi-preconditioned conjugate gradients, warm-started at the measured
    positions.  Raises :class:`SolverDiverged` if the relative residual does
    not reach ``cfg.tol`` within ``cfg.max_iter`` iterations.
    """
    cfg = cfg or FusionConfig()
    if not surface.valid.any():
        raise EmptyInput("surface has no valid pixel")
    x, info = _solve(surface, cfg)
    colors = None if surface.colors is None else surface.colors[surface.valid]
    cloud = PointCloud(x, surface.corrected_normals[surface.valid], colors=colors)
    return (cloud, info) if return_info else cloud


class PositionNormalFusion(TransformerMixin, BaseEstimator):
    """Two-stage position/normal fusion as an estimator.

    ``fit`` runs the bias correction and the sparse solve on a
    :class:`FusedSurface`; the optimized cloud is kept in ``cloud_`` and
    solver statistics in ``n_iter_``, ``objective_initial_`` and
    ``objective_``.
    """

    def __init__(
        self,
        weight_position=1.0,
        weight_normal=3.0,
        smoothing_radius=7,
        tol=1e-8,
        max_iter=2000,
        correct_bias=True,
    ):
        self.weight_position = weight_position
        self.weight_normal = weight_normal
        self.smoothing_radius = smoothing_radius
        self.tol = tol
        self.max_iter = max_iter
        self.correct_bias = correct_bias

    def _config(self):
        return FusionConfig(
            self.weight_position, self.weight_normal, self.smoothing_radius, self.tol, self.max_iter
        )

    def fit(self, X, y=None):
        cfg = self._config()
        surface = correct_normal_bias(X, cfg) if self.correct_bias else X
        cloud, info = joint_optimize(surface, cfg, return_info=True)
        self.surface_ = surface
        self.cloud_ = cloud
        self.n_iter_ = info.iterations
        self.residual_ = info.residual
        self.objective_initial_ = info.objective_initial
        self.objective_ = info.objective_final
        return self

    def transform(self, X):
        """Fuse another surface with the fitted parameters."""
        check_is_fitted(self, "cloud_")
        cfg = self._config()
        surface = correct_normal_bias(X, cfg) if self.correct_bias else X
        return joint_optimize(surface, cfg)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X).cloud_
