"""Multispectral photometric stereo with depth priors.

Under three spectrally separated lights a Lambertian pixel obeys
``C = M @ n`` where ``M`` folds light directions, intensities, sensor
response, chromaticity and albedo into one 3x3 matrix per chromaticity
segment.  ``M`` is fitted by least squares against normals derived from the
SLAM depth, then every pixel's normal is ``normalize(inv(M) @ C)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_label_map, check_mask, check_normal_map
from .core import MultispectralImage, NormalMap
from .exceptions import DegeneratePriors, InsufficientPriors, SingularMixing

DEFAULT_SHADOW_FRACTION = 0.02
DEFAULT_CONDITION_THRESHOLD = 1e6


def default_shadow_threshold(img: MultispectralImage) -> float:
    return DEFAULT_SHADOW_FRACTION * float(img.data.max())


def shadow_mask(img: MultispectralImage, threshold: float | None = None) -> np.ndarray:
    """Boolean mask of usable pixels: ``False`` where any channel < ``threshold``.

    ``threshold=None`` uses 2% of the image's brightest channel value.
    """
    img = check_image(img)
    if threshold is None:
        threshold = default_shadow_threshold(img)
    if threshold < 0:
        raise ValueError("shadow threshold must be non-negative")
    return np.all(img.data >= threshold, axis=-1)


def chromaticity(colors) -> np.ndarray:
    """Channel-normalized color ``C / sum(C)`` (zeros stay zero)."""
    colors = np.asarray(colors, dtype=np.float64)
    s = colors.sum(axis=-1, keepdims=True)
    return np.divide(colors, s, out=np.zeros_like(colors), where=s > 0)


@dataclass(frozen=True)
class SegmentationConfig:
    n_clusters: int = 1
    min_segment_size: int = 100
    seed: int = 0
    max_fit_samples: int = 20000

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("need at least one cluster")
        if self.min_segment_size < 1:
            raise ValueError("minimum segment size must be at least 1")


class ChromaticitySegmenter(ClusterMixin, BaseEstimator):
    """k-means over per-pixel chromaticity followed by a small-segment merge.

    Fitting sees a deterministic subsample of at most ``max_fit_samples``
    pixels, and clusters holding fewer than ``min_segment_size`` pixels are
    dropped.  ``predict`` assigns every unmasked pixel to its nearest center
    (label = center index + 1, masked pixels get 0) and merges connected
    islands smaller than ``min_segment_size`` into the chromatically nearest
    adjacent segment.
    """

    def __init__(self, n_clusters=1, min_segment_size=100, random_state=0, max_fit_samples=20000):
        self.n_clusters = n_clusters
        self.min_segment_size = min_segment_size
        self.random_state = random_state
        self.max_fit_samples = max_fit_samples

    def fit(self, X, y=None, mask=None):
        img = check_image(X)
        mask = check_mask(mask, img.shape) & (img.data.sum(axis=-1) > 0)
        chroma = chromaticity(img.data[mask])
        if len(chroma) == 0:
            self.cluster_centers_ = np.zeros((0, 3))
            self.labels_ = np.zeros(img.shape, np.int64)
            return self

        rng = np.random.default_rng(self.random_state)
        sample = chroma
        if len(chroma) > self.max_fit_samples:
            sample = chroma[np.sort(rng.choice(len(chroma), self.max_fit_samples, replace=False))]
        n_distinct = len(np.unique(np.round(sample, 9), axis=0))
        k = int(min(self.n_clusters, n_distinct))
        if k == 1:
            centers = sample.mean(axis=0, keepdims=True)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                km = KMeans(n_clusters=k, n_init=4, random_state=self.random_state).fit(sample)
            centers = km.cluster_centers_
        # drop clusters too small to form a segment; their pixels fall to the
        # chromatically nearest surviving center
        while len(centers) > 1:
            counts = np.bincount(_nearest_center(chroma, centers), minlength=len(centers))
            if counts.min() >= self.min_segment_size:
                break
            centers = np.delete(centers, np.argmin(counts), axis=0)
        self.cluster_centers_ = centers
        self.labels_ = self.predict(img, mask=mask)
        return self

    def predict(self, X, mask=None):
        check_is_fitted(self, "cluster_centers_")
        img = check_image(X)
        mask = check_mask(mask, img.shape) & (img.data.sum(axis=-1) > 0)
        labels = np.zeros(img.shape, np.int64)
        centers = self.cluster_centers_
        if len(centers) == 0 or not mask.any():
            return labels
        labels[mask] = _nearest_center(chromaticity(img.data[mask]), centers) + 1
        return _merge_islands(labels, centers, self.min_segment_size)


def _nearest_center(chroma, centers):
    d2 = ((chroma[:, None, :] - centers[None]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def _merge_islands(labels, centers, min_size):
    """Reassign connected islands smaller than ``min_size`` to the adjacent
    segment whose center is chromatically nearest (or, without centers, the
    one sharing the longest border)."""
    present = [int(i) for i in np.unique(labels[labels > 0])]
    if len(present) <= 1:
        return labels
    labels = labels.copy()
    four = ndimage.generate_binary_structure(2, 1)
    for lab in present:
        comp, n_comp = ndimage.label(labels == lab, structure=four)
        if n_comp <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, n_comp + 1))
        slices = ndimage.find_objects(comp)
        for ci in np.nonzero(sizes < min_size)[0]:
            sl = tuple(slice(max(s.start - 1, 0), s.stop + 1) for s in slices[ci])
            region = comp[sl] == ci + 1
            ring = ndimage.binary_dilation(region, structure=four) & ~region
            neighbours = [int(n) for n in np.unique(labels[sl][ring]) if n > 0 and n != lab]
            if not neighbours:
                continue
            if centers is None:
                ring_labels = labels[sl][ring]
                target = max(neighbours, key=lambda i: np.count_nonzero(ring_labels == i))
            else:
                own = centers[lab - 1]
                target = min(neighbours, key=lambda i: np.sum((centers[i - 1] - own) ** 2))
            labels[sl][region] = target
    return labels


def segment_chromaticity(
    img: MultispectralImage, cfg: SegmentationConfig | None = None, mask=None
) -> np.ndarray:
    """Label map of constant-chromaticity segments (0 where masked)."""
    cfg = cfg or SegmentationConfig()
    seg = ChromaticitySegmenter(
        cfg.n_clusters, cfg.min_segment_size, cfg.seed, cfg.max_fit_samples
    )
    return seg.fit(img, mask=mask).labels_


@dataclass(frozen=True)
class MixingConfig:
    condition_threshold: float = DEFAULT_CONDITION_THRESHOLD
    exclude_interpolated: bool = True
    min_pixels: int = 9
    min_eigenvalue: float = 1e-6
    trim_fraction: float = 0.0
    trim_iterations: int = 5

    def __post_init__(self):
        if not 0 <= self.trim_fraction < 1:
            raise ValueError("trim fraction must lie in [0, 1)")


@dataclass
class MixingModel:
    """Per-segment mixing matrices plus the label map they apply to.

    Segments that could not be modeled are listed in ``failures`` with the
    exception describing why.
    """

    labels: np.ndarray
    matrices: dict = field(default_factory=dict)
    conditions: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    condition_threshold: float = DEFAULT_CONDITION_THRESHOLD

    def is_modeled(self, label: int) -> bool:
        return label in self.matrices

    @property
    def modeled_mask(self) -> np.ndarray:
        return np.isin(self.labels, list(self.matrices)) & (self.labels > 0)


def angular_residual(C, N, M) -> np.ndarray:
    """Angle (radians) between observed colors and the model prediction ``M @ n``."""
    pred = N @ M.T
    num = np.einsum("ij,ij->i", pred, C)
    den = np.linalg.norm(pred, axis=1) * np.linalg.norm(C, axis=1)
    return np.arccos(np.clip(num / np.where(den > 0, den, 1.0), -1.0, 1.0))


def _fit_mixing(C, N, trim, iterations):
    keep = np.ones(len(C), bool)
    for _ in range(iterations if trim > 0 else 1):
        Mt, *_ = np.linalg.lstsq(N[keep], C[keep], rcond=None)
        M = Mt.T
        if trim > 0:
            r = angular_residual(C, N, M)
            new_keep = r <= np.quantile(r, 1.0 - trim)
            # refitting on a rank-deficient remainder would be worse than stopping
            if new_keep.sum() < 9 or np.array_equal(new_keep, keep):
                break
            keep = new_keep
    return M


def estimate_mixing(
    img: MultispectralImage,
    priors: NormalMap,
    labels,
    cfg: MixingConfig | None = None,
    mask=None,
    interpolated=None,
) -> MixingModel:
    """Least-squares ``M`` per segment from ``C ~ M @ n_prior``.

    Only pixels inside ``mask`` with a valid prior are used; pixels flagged in
    ``interpolated`` are dropped too unless ``cfg.exclude_interpolated`` is off.
    Segments with fewer than ``cfg.min_pixels`` usable pixels fail with
    :class:`InsufficientPriors`; segments whose prior normals do not span
    3-D (smallest eigenvalue of the normal second-moment matrix at or below
    ``cfg.min_eigenvalue``) fail with :class:`DegeneratePriors`; badly
    conditioned fits fail with :class:`SingularMixing`.

    With ``cfg.trim_fraction > 0`` the fit is repeated after discarding that
    fraction of pixels with the largest angular residual, which keeps a tail
    of bad priors from tilting ``M``.
    """
    cfg = cfg or MixingConfig()
    img = check_image(img)
    priors = check_normal_map(priors, img.shape)
    labels = check_label_map(labels, img.shape)
    usable = check_mask(mask, img.shape) & priors.valid
    if interpolated is not None and cfg.exclude_interpolated:
        usable &= ~check_mask(interpolated, img.shape)

    model = MixingModel(labels, condition_threshold=cfg.condition_threshold)
    for lab in np.unique(labels[labels > 0]):
        lab = int(lab)
        sel = usable & (labels == lab)
        N = priors.normals[sel]
        C = img.data[sel]
        if len(N) < cfg.min_pixels:
            model.failures[lab] = InsufficientPriors(
                f"segment {lab}: {len(N)} usable prior pixels, need {cfg.min_pixels}"
            )
            continue
        smallest = np.linalg.eigvalsh(N.T @ N / len(N))[0]
        if smallest <= cfg.min_eigenvalue:
            model.failures[lab] = DegeneratePriors(
                f"segment {lab}: prior normals are rank deficient (eigenvalue {smallest:.3g})"
            )
            continue
        M = _fit_mixing(C, N, cfg.trim_fraction, cfg.trim_iterations)
        cond = float(np.linalg.cond(M))
        if not np.isfinite(cond) or cond > cfg.condition_threshold:
            model.failures[lab] = SingularMixing(
                f"segment {lab}: condition number {cond:.3g} exceeds {cfg.condition_threshold:.3g}"
            )
            continue
        model.matrices[lab] = M
        model.conditions[lab] = cond
    return model


def refine_segments(
    img: MultispectralImage,
    priors: NormalMap,
    labels,
    cfg: MixingConfig | None = None,
    mask=None,
    interpolated=None,
    max_iter: int = 30,
    min_segment_size: int = 100,
) -> np.ndarray:
    """Alternate per-segment fitting and reassignment until labels settle.

    Under three separated lights the raw chromaticity of a pixel depends on
    its normal as much as on its albedo, so k-means alone cuts a uniform
    object along shading.  Starting from such a labeling, every pixel with a
    usable prior is moved to the segment whose ``M @ n_prior`` points closest
    to its observed color; the remaining masked pixels take the label of the
    nearest reassigned pixel.  Existing label ids are kept.
    """
    cfg = cfg or MixingConfig()
    img = check_image(img)
    priors = check_normal_map(priors, img.shape)
    labels = check_label_map(labels, img.shape)
    mask = check_mask(mask, img.shape) & (labels > 0)
    usable = mask & priors.valid
    if interpolated is not None and cfg.exclude_interpolated:
        usable &= ~check_mask(interpolated, img.shape)
    if len(np.unique(labels[mask])) <= 1 or not usable.any():
        return labels

    C = img.data[usable]
    N = priors.normals[usable]
    for _ in range(max_iter):
        model = estimate_mixing(img, priors, labels, cfg, mask=mask, interpolated=interpolated)
        ids = sorted(model.matrices)
        if len(ids) <= 1:
            break
        resid = np.stack([angular_residual(C, N, model.matrices[i]) for i in ids])
        new = np.zeros_like(labels)
        new[usable] = np.asarray(ids)[np.argmin(resid, axis=0)]
        _, (ri, ci) = ndimage.distance_transform_edt(new == 0, return_indices=True)
        new = np.where(mask, new[ri, ci], 0)
        new = _merge_islands(new, None, min_segment_size)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels


def recover_normals(img: MultispectralImage, model: MixingModel, mask=None) -> NormalMap:
    """Per-pixel ``normalize(inv(M) @ C)`` for labeled, modeled, unmasked pixels."""
    img = check_image(img)
    labels = check_label_map(model.labels, img.shape)
    mask = check_mask(mask, img.shape)
    out = np.zeros(img.shape + (3,))
    valid = np.zeros(img.shape, bool)
    for lab, M in model.matrices.items():
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > model.condition_threshold:
            raise SingularMixing(f"segment {lab}: condition number {cond:.3g} too large")
        sel = mask & (labels == lab)
        if not sel.any():
            continue
        n = np.linalg.solve(M, img.data[sel].T).T
        length = np.linalg.norm(n, axis=1)
        ok = length > 0
        idx = np.nonzero(sel)
        out[idx[0][ok], idx[1][ok]] = n[ok] / length[ok, None]
        valid[idx[0][ok], idx[1][ok]] = True
    return NormalMap(out, valid)


class MultispectralPhotometricStereo(BaseEstimator):
    """Estimator wrapper: ``fit`` learns per-segment mixing matrices from an
    image and depth-prior normals, ``predict`` recovers dense normals.

    Parameters
    ----------
    n_segments : int
        Number of chromaticity clusters (ignored when labels are supplied).
    min_segment_size : int
        Segments or islands below this many pixels are merged away.
    shadow_threshold : float or None
        Radiance below which a channel counts as shadowed; None means 2% of
        the image maximum.
    condition_threshold : float
        Largest accepted condition number of a mixing matrix.
    exclude_interpolated : bool
        Ignore priors at hole-filled depth pixels when fitting.
    trim_fraction : float
        Share of worst-fitting prior pixels dropped when refitting ``M``.
    refine_iterations : int
        Rounds of prior-guided segment reassignment after k-means (only used
        with more than one segment).
    random_state : int
        Seed for the segmentation.
    """

    def __init__(
        self,
        n_segments=1,
        min_segment_size=100,
        shadow_threshold=None,
        condition_threshold=DEFAULT_CONDITION_THRESHOLD,
        exclude_interpolated=True,
        trim_fraction=0.0,
        refine_iterations=30,
        random_state=0,
    ):
        self.n_segments = n_segments
        self.min_segment_size = min_segment_size
        self.shadow_threshold = shadow_threshold
        self.condition_threshold = condition_threshold
        self.exclude_interpolated = exclude_interpolated
        self.trim_fraction = trim_fraction
        self.refine_iterations = refine_iterations
        self.random_state = random_state

    def _config(self):
        return MixingConfig(
            self.condition_threshold,
            self.exclude_interpolated,
            trim_fraction=self.trim_fraction,
        )

    def fit(self, X, y, labels=None, interpolated=None):
        """Fit on image ``X`` with prior normals ``y`` (a NormalMap)."""
        img = check_image(X)
        priors = check_normal_map(y, img.shape)
        mask = shadow_mask(img, self.shadow_threshold)
        cfg = self._config()
        if labels is None:
            self.segmenter_ = ChromaticitySegmenter(
                self.n_segments, self.min_segment_size, self.random_state
            ).fit(img, mask=mask)
            labels = self.segmenter_.labels_
            if self.n_segments > 1 and self.refine_iterations > 0:
                labels = refine_segments(
                    img, priors, labels, cfg, mask, interpolated,
                    self.refine_iterations, self.min_segment_size,
                )
        else:
            self.segmenter_ = None
            labels = check_label_map(labels, img.shape)
        self.labels_ = labels
        self.mask_ = mask
        self.mixing_ = estimate_mixing(
            img, priors, labels, cfg, mask=mask, interpolated=interpolated
        )
        return self

    def predict(self, X, labels=None) -> NormalMap:
        """Recover normals for ``X`` with the fitted mixing matrices.

        Without explicit ``labels`` a new image is segmented with the fitted
        chromaticity centers.
        """
        check_is_fitted(self, "mixing_")
        img = check_image(X)
        mask = shadow_mask(img, self.shadow_threshold)
        if labels is None:
            labels = self.labels_ if self.segmenter_ is None else self.segmenter_.predict(img, mask)
        model = MixingModel(
            check_label_map(labels, img.shape),
            self.mixing_.matrices,
            self.mixing_.conditions,
            self.mixing_.failures,
            self.condition_threshold,
        )
        return recover_normals(img, model, mask)

    def fit_predict(self, X, y, labels=None, interpolated=None) -> NormalMap:
        """Fit, then recover normals of the same image with the fitted labels."""
        self.fit(X, y, labels=labels, interpolated=interpolated)
        return recover_normals(X, self.mixing_, self.mask_)
