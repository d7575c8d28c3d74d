"""Rigid registration of point clouds and voxel-deduplicated merging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .core import CameraPose, PointCloud
from .exceptions import DegenerateCorrespondences, EmptyInput, InsufficientOverlap

# default correspondence gate, relative to the target bounding-box diagonal
DEFAULT_DISTANCE_FRACTION = 0.05


@dataclass(frozen=True)
class IcpConfig:
    max_iter: int = 50
    tol: float = 1e-6
    max_distance: float | None = None
    trim: float = 0.1
    min_fitness: float = 0.3
    degeneracy_threshold: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.max_distance is not None and not self.max_distance > 0:
            raise ValueError("max_distance must be positive")
        if not 0 <= self.trim < 1:
            raise ValueError("trim must lie in [0, 1)")
        if not 0 <= self.min_fitness <= 1:
            raise ValueError("min_fitness must lie in [0, 1]")
        if self.degeneracy_threshold is not None and not 0 < self.degeneracy_threshold < 1:
            raise ValueError("degeneracy_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class Registration:
    """Rigid map ``x -> R x + t`` taking source coordinates into the target frame."""

    rotation: np.ndarray
    translation: np.ndarray
    fitness: float = 1.0
    rms: float = 0.0
    iterations: int = 0
    trace: tuple = field(default_factory=tuple)
    degenerate_dims: int = 0

    @classmethod
    def identity(cls) -> "Registration":
        return cls(np.eye(3), np.zeros(3))

    @property
    def pose(self) -> CameraPose:
        return CameraPose.from_matrix(self.rotation, self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def transform_cloud(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(
            self.apply(cloud.positions),
            cloud.normals @ self.rotation.T,
            cloud.has_normal,
            cloud.colors,
            cloud.keyframe,
        )


def estimate_rigid_transform(source, target, weights=None):
    """Least-squares rotation and translation with ``target ~ R source + t``.

    Closed form from the SVD of the cross-covariance, with the reflection
    case corrected so that ``det R = +1``.

    Raises
    ------
    DegenerateCorrespondences
        Fewer than three pairs, or all source (or target) points collinear.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("source and target must have the same number of points")
    if len(src) < 3:
        raise DegenerateCorrespondences(f"need at least 3 correspondences, got {len(src)}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    a = src - mu_s
    b = dst - mu_d
    for pts in (a, b):
        sv = np.linalg.svd(pts * np.sqrt(w)[:, None], compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
            raise DegenerateCorrespondences("correspondences are collinear")
    H = (a * w[:, None]).T @ b
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def _constrain_update(R, t, R_new, t_new, x, m, threshold):
    """Drop the part of an update that the surface geometry does not constrain.

    ``x`` are the current source positions of the correspondences and ``m``
    the target normals.  The eigenvectors of the point-to-plane information
    matrix with eigenvalues below ``threshold`` times the largest span the
    motions the surface cannot observe (for example rotation of a sphere
    about its centre); the incremental twist is projected onto the rest.
    Returns the constrained transform and the number of dropped dimensions.
    """
    c = x.mean(axis=0)
    L = np.sqrt(np.mean(np.sum((x - c) ** 2, axis=1)))
    if not L > 0:
        return R_new, t_new, 0
    J = np.hstack([np.cross((x - c) / L, m), m])
    w, V = np.linalg.eigh(J.T @ J / len(J))
    good = w > threshold * w[-1]
    dR = R_new @ R.T
    # increment written as y = dR (x - c) + c + delta
    delta = t_new - dR @ t + dR @ c - c
    xi = np.concatenate([Rotation.from_matrix(dR).as_rotvec() * L, delta])
    xi = V[:, good] @ (V[:, good].T @ xi)
    dR = Rotation.from_rotvec(xi[:3] / L).as_matrix()
    R_out = dR @ R
    t_out = dR @ (t - c) + c + xi[3:]
    return R_out, t_out, int(np.count_nonzero(~good))


def default_max_distance(target: PointCloud) -> float:
    P = target.positions
    diag = float(np.linalg.norm(P.max(axis=0) - P.min(axis=0)))
    return DEFAULT_DISTANCE_FRACTION * diag if diag > 0 else 1.0


def icp_register(
    source: PointCloud,
    target: PointCloud,
    cfg: IcpConfig | None = None,
    init: Registration | None = None,
) -> Registration:
    """Trimmed point-to-point ICP of ``source`` onto ``target``.

    The number of kept correspondences is fixed at the first iteration
    (``(1 - trim)`` of the gated matches), which makes the trimmed RMS a
    non-increasing sequence; an update that would raise it is rejected and
    ends the iteration.

    Raises
    ------
    EmptyInput
        Either cloud is empty.
    InsufficientOverlap
        Final fitness is below ``cfg.min_fitness``; the exception carries the
        registration reached.
    """
    cfg = cfg or IcpConfig()
    source = check_points(source)
    target = check_points(target)
    if len(source) == 0 or len(target) == 0:
        raise EmptyInput("icp needs two nonempty clouds")
    gate = cfg.max_distance if cfg.max_distance is not None else default_max_distance(target)
    tree = cKDTree(target.positions)
    S = source.positions
    T = target.positions
    R = np.eye(3) if init is None else np.asarray(init.rotation, dtype=np.float64)
    t = np.zeros(3) if init is None else np.asarray(init.translation, dtype=np.float64)

    def match(R, t):
        dist, j = tree.query(S @ R.T + t, distance_upper_bound=gate)
        return dist, j

    keep = None
    trace = []
    iterations = 0
    degenerate = 0
    constrain = cfg.degeneracy_threshold is not None
    for _ in range(cfg.max_iter):
        dist, j = match(R, t)
        gated = np.nonzero(np.isfinite(dist))[0]
        if keep is None:
            keep = max(int(np.floor((1.0 - cfg.trim) * len(gated))), min(3, len(gated)))
        if len(gated) < 3:
            break
        order = gated[np.argsort(dist[gated], kind="stable")][:keep]
        rms = float(np.sqrt(np.mean(dist[order] ** 2)))
        if trace and rms > trace[-1]:
            # rejected step: restore the previous transform
            R, t = prev
            break
        trace.append(rms)
        if len(trace) > 1 and trace[-2] - rms < cfg.tol:
            break
        try:
            R_new, t_new = estimate_rigid_transform(S[order], T[j[order]])
        except DegenerateCorrespondences:
            break
        if constrain:
            with_normal = target.has_normal[j[order]]
            if np.count_nonzero(with_normal) >= 6:
                sel = order[with_normal]
                R_new, t_new, degenerate = _constrain_update(
                    R, t, R_new, t_new, S[sel] @ R.T + t, target.normals[j[sel]],
                    cfg.degeneracy_threshold,
                )
        prev = (R, t)
        R, t = R_new, t_new
        iterations += 1

    dist, _ = match(R, t)
    fitness = float(np.count_nonzero(np.isfinite(dist))) / len(S)
    rms = trace[-1] if trace else float("inf")
    reg = Registration(R, t, fitness, rms, iterations, tuple(trace), degenerate)
    if fitness < cfg.min_fitness:
        raise InsufficientOverlap(
            f"only {fitness:.1%} of source points lie within {gate:.4g} of the target "
            f"(minimum {cfg.min_fitness:.1%})",
            registration=reg,
        )
    return reg


def median_spacing(points, max_queries: int = 20000) -> float:
    """Median nearest-neighbour distance (0 for fewer than two points).

    At most ``max_queries`` evenly strided points are queried.
    """
    P = np.asarray(points, dtype=np.float64)
    if len(P) < 2:
        return 0.0
    stride = max(1, int(np.ceil(len(P) / max_queries)))
    d, _ = cKDTree(P).query(P[::stride], k=2)
    return float(np.median(d[:, 1]))


def _voxel_keys(P, voxel):
    cells = np.floor((P - P.min(axis=0)) / voxel).astype(np.int64)
    dims = cells.max(axis=0) + 1
    if np.prod(dims.astype(np.float64)) < 2.0**62:
        return (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    return np.unique(cells, axis=0, return_inverse=True)[1].ravel()


def merge_clouds(
    base: PointCloud,
    incoming: PointCloud,
    reg: Registration | None = None,
    voxel: float | None = None,
) -> PointCloud:
    """Union of ``base`` and the registered ``incoming`` with one point per voxel.

    Within a voxel the survivor is the first point after ordering by: carries
    a normal, lower keyframe id, earlier position in ``base + incoming``.
    Survivors keep that order.  ``voxel=None`` picks half the larger of the
    two clouds' median nearest-neighbour spacings.
    """
    if len(incoming) == 0:
        return base
    moved = incoming if reg is None else reg.transform_cloud(incoming)
    union = PointCloud.concatenate([base, moved]) if len(base) else moved
    P = union.positions
    if voxel is None:
        # per cloud, so exact duplicates across the two do not collapse the scale
        voxel = 0.5 * max(median_spacing(base.positions), median_spacing(moved.positions))
    if not voxel > 0:
        return union
    key = _voxel_keys(P, voxel)
    idx = np.arange(len(P))
    order = np.lexsort((idx, union.keyframe, ~union.has_normal, key))
    first = np.ones(len(order), bool)
    first[1:] = key[order][1:] != key[order][:-1]
    return union.subset(np.sort(order[first]))


class IterativeClosestPoint(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(source, target)`` then ``transform(points)``."""

    def __init__(self, max_iter=50, tol=1e-6, max_distance=None, trim=0.1, min_fitness=0.3):
        self.max_iter = max_iter
        self.tol = tol
        self.max_distance = max_distance
        self.trim = trim
        self.min_fitness = min_fitness

    def fit(self, X, y):
        cfg = IcpConfig(self.max_iter, self.tol, self.max_distance, self.trim, self.min_fitness)
        reg = icp_register(check_points(X), check_points(y), cfg)
        self.registration_ = reg
        self.rotation_ = reg.rotation
        self.translation_ = reg.translation
        self.fitness_ = reg.fitness
        self.n_iter_ = reg.iterations
        return self

    def transform(self, X):
        check_is_fitted(self, "registration_")
        if isinstance(X, PointCloud):
            return self.registration_.transform_cloud(X)
        return self.registration_.apply(check_points(X).positions)
