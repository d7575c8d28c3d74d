"""Input coercion helpers used by the estimator classes."""

from __future__ import annotations

import numpy as np

from .core import DepthMap, MultispectralImage, NormalMap, PointCloud
from .exceptions import DimensionMismatch


def check_image(img) -> MultispectralImage:
    if isinstance(img, MultispectralImage):
        return img
    return MultispectralImage(np.asarray(img, dtype=np.float64))


def check_normal_map(normals, shape=None) -> NormalMap:
    if not isinstance(normals, NormalMap):
        normals = NormalMap(np.asarray(normals, dtype=np.float64))
    if shape is not None and normals.shape != tuple(shape):
        raise DimensionMismatch(f"normal map {normals.shape} does not match {tuple(shape)}")
    return normals


def check_depth_map(depth, shape=None) -> DepthMap:
    if not isinstance(depth, DepthMap):
        depth = DepthMap(np.asarray(depth, dtype=np.float64))
    if shape is not None and depth.shape != tuple(shape):
        raise DimensionMismatch(f"depth map {depth.shape} does not match {tuple(shape)}")
    return depth


def check_label_map(labels, shape) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise DimensionMismatch(f"label map {labels.shape} does not match {tuple(shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise ValueError("label map must hold integers")
    labels = labels.astype(np.int64)
    if np.any(labels < 0):
        raise ValueError("labels must be non-negative")
    return labels


def check_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, bool)
    mask = np.asarray(mask, bool)
    if mask.shape != tuple(shape):
        raise DimensionMismatch(f"mask {mask.shape} does not match {tuple(shape)}")
    return mask


def check_points(points) -> PointCloud:
    if isinstance(points, PointCloud):
        return points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {arr.shape}")
    return PointCloud(arr)
