"""SLAM keyframe ingestion: depth extraction, rescaling, hole filling,
prior normals and backprojection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._grid import gaussian_smooth, grid_normals
from .core import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    InverseDepthMap,
    MultispectralImage,
    NormalMap,
    PointCloud,
    pose_apply,
)
from .exceptions import AllInvalid, NonPositiveScale

INVDEPTH_EPS = 1e-9


@dataclass(frozen=True)
class KeyframeBundle:
    """One SLAM keyframe as handed to the densification pipeline.

    ``scale`` is the factor that turns the normalized SLAM depth (mean inverse
    depth of one) back into scene units.
    """

    keyframe_id: int
    image: MultispectralImage
    inverse_depth: InverseDepthMap
    pose: CameraPose
    scale: float
    intrinsics: CameraIntrinsics
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.image.shape != self.inverse_depth.shape:
            raise ValueError(
                f"keyframe {self.keyframe_id}: image {self.image.shape} and inverse depth "
                f"{self.inverse_depth.shape} differ in size"
            )
        if self.image.shape != self.intrinsics.shape:
            raise ValueError(f"keyframe {self.keyframe_id}: intrinsics do not match image size")
        if not self.scale > 0:
            raise NonPositiveScale(f"keyframe {self.keyframe_id}: scale must be positive")


def invdepth_to_depth(idmap: InverseDepthMap) -> DepthMap:
    """Reciprocal of positive inverse depths; negative or missing become invalid (0)."""
    v = idmap.values
    valid = np.isfinite(v) & (v > INVDEPTH_EPS)
    depth = np.zeros(v.shape)
    depth[valid] = 1.0 / v[valid]
    return DepthMap(depth, valid)


def rescale_depth(depth: DepthMap, scale: float) -> DepthMap:
    if not (np.isfinite(scale) and scale > 0):
        raise NonPositiveScale(f"depth scale must be positive, got {scale}")
    return DepthMap(depth.depth * scale, depth.valid, depth.interpolated)


def _nearest_along(valid, axis, reverse):
    """Index of the nearest valid pixel before (or after) each pixel on ``axis``."""
    n = valid.shape[axis]
    shape = [1, 1]
    shape[axis] = n
    idx = np.arange(n).reshape(shape)
    idx = np.broadcast_to(idx, valid.shape)
    if not reverse:
        marked = np.where(valid, idx, -1)
        return np.maximum.accumulate(marked, axis=axis)
    marked = np.where(valid, idx, n)
    flipped = np.flip(marked, axis=axis)
    return np.flip(np.minimum.accumulate(flipped, axis=axis), axis=axis)


def fill_holes_bilinear(depth: DepthMap) -> DepthMap:
    """Fill invalid pixels from the nearest valid pixels along rows and columns.

    Each hole takes the inverse-distance weighted mean of the nearest valid
    pixel to its left, right, top and bottom (whichever exist).  Holes with no
    valid pixel on their row or column copy the nearest valid pixel.
    Filled pixels are flagged in ``interpolated``.
    """
    valid = depth.valid
    if not valid.any():
        raise AllInvalid("depth map has no valid pixel to interpolate from")
    if valid.all():
        return depth
    d = depth.depth
    H, W = d.shape
    rows = np.broadcast_to(np.arange(H)[:, None], (H, W))
    cols = np.broadcast_to(np.arange(W)[None, :], (H, W))

    num = np.zeros((H, W))
    den = np.zeros((H, W))
    for axis, reverse in ((1, False), (1, True), (0, False), (0, True)):
        nb = _nearest_along(valid, axis, reverse)
        limit = W if axis == 1 else H
        found = (nb >= 0) & (nb < limit)
        nb_c = np.clip(nb, 0, limit - 1)
        if axis == 1:
            vals = d[rows, nb_c]
            dist = np.abs(nb_c - cols)
        else:
            vals = d[nb_c, cols]
            dist = np.abs(nb_c - rows)
        found &= ~valid
        w = np.where(found, 1.0 / np.maximum(dist, 1), 0.0)
        num += w * vals
        den += w

    out = d.copy()
    axis_hit = ~valid & (den > 0)
    out[axis_hit] = num[axis_hit] / den[axis_hit]
    orphan = ~valid & ~axis_hit
    if orphan.any():
        _, (ri, ci) = ndimage.distance_transform_edt(~valid, return_indices=True)
        out[orphan] = d[ri[orphan], ci[orphan]]
    return DepthMap(out, np.ones_like(valid), ~valid | depth.interpolated)


def backproject_grid(depth: DepthMap, intr: CameraIntrinsics) -> np.ndarray:
    """``(H, W, 3)`` camera-frame positions; invalid pixels are zero."""
    if depth.shape != intr.shape:
        raise ValueError(f"depth {depth.shape} does not match intrinsics {intr.shape}")
    return intr.pixel_rays() * depth.depth[..., None]


def depth_to_prior_normals(
    depth: DepthMap, intr: CameraIntrinsics, smoothing: float = 0.0
) -> NormalMap:
    """Surface normals from depth by central differences of backprojected points.

    Pixels next to an invalid depth are invalid.  ``smoothing`` (Gaussian sigma
    in pixels, default off) low-passes the depth over valid pixels first, which
    is what makes noisy semi-dense priors usable.
    """
    valid = depth.valid
    if smoothing > 0:
        smoothed, _ = gaussian_smooth(depth.depth, valid, smoothing)
        depth = DepthMap(np.where(valid, smoothed, 0.0), valid, depth.interpolated)
    P = backproject_grid(depth, intr)
    n, ok = grid_normals(P, valid, strict=True)
    return NormalMap(n, ok)


def backproject(
    depth: DepthMap,
    intr: CameraIntrinsics,
    pose: CameraPose,
    image: MultispectralImage | None = None,
    keyframe_id: int = -1,
) -> PointCloud:
    """One world-frame point per valid pixel, in row-major pixel order."""
    P = backproject_grid(depth, intr)[depth.valid]
    colors = None
    if image is not None:
        c = image.data[depth.valid]
        peak = image.data.max()
        colors = c / peak if peak > 0 else c
    return PointCloud(pose_apply(pose, P), colors=colors, keyframe=keyframe_id)
