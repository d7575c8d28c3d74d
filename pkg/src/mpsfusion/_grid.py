"""Finite-difference helpers on per-pixel position grids."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def _axis_tangent(P, valid, axis, strict, step=1):
    n = P.shape[axis]
    fwd = np.zeros_like(P)
    bwd = np.zeros_like(P)
    has_fwd = np.zeros(valid.shape, bool)
    has_bwd = np.zeros(valid.shape, bool)
    # neighbour exists inside the image
    in_fwd = np.zeros(valid.shape, bool)
    in_bwd = np.zeros(valid.shape, bool)

    lo = [slice(None)] * 2
    hi = [slice(None)] * 2
    step = min(step, max(n - 1, 1))
    lo[axis] = slice(0, n - step)
    hi[axis] = slice(step, n)
    lo, hi = tuple(lo), tuple(hi)

    diff = P[hi] - P[lo]
    pair = valid[hi] & valid[lo]
    fwd[lo] = diff
    has_fwd[lo] = pair
    in_fwd[lo] = True
    bwd[hi] = diff
    has_bwd[hi] = pair
    in_bwd[hi] = True

    both = has_fwd & has_bwd
    tangent = np.where(both[..., None], 0.5 * (fwd + bwd), np.where(has_fwd[..., None], fwd, bwd))
    ok = valid & (has_fwd | has_bwd)
    if strict:
        ok &= ~(in_fwd & ~has_fwd) & ~(in_bwd & ~has_bwd)
    return tangent, ok


def grid_normals(P, valid, strict: bool = True, eps: float = 1e-12, step: int = 1):
    """Unit normals of an ``(H, W, 3)`` camera-frame position grid.

    Tangents are central differences along image rows and columns, falling
    back to one-sided differences where a neighbour is missing.  With
    ``strict`` any pixel with an invalid in-image neighbour is rejected.
    ``step`` sets the neighbour offset in pixels.
    Normals are oriented to face the camera (``n . p < 0``).
    """
    P = np.asarray(P, dtype=np.float64)
    valid = np.asarray(valid, bool)
    tu, ok_u = _axis_tangent(P, valid, 1, strict, step)
    tv, ok_v = _axis_tangent(P, valid, 0, strict, step)
    n = np.cross(tu, tv)
    length = np.linalg.norm(n, axis=-1)
    scale = np.linalg.norm(tu, axis=-1) * np.linalg.norm(tv, axis=-1)
    ok = ok_u & ok_v & (length > eps * np.maximum(scale, eps))
    n = np.where(ok[..., None], n / np.where(ok, length, 1.0)[..., None], 0.0)
    flip = np.einsum("ijk,ijk->ij", n, P) > 0
    n[flip] *= -1
    return n, ok


def masked_filter(values, valid, filt):
    """Normalized convolution: ``filt`` applied to valid samples only."""
    w = valid.astype(np.float64)
    if values.ndim == 3:
        num = np.stack([filt(values[..., c] * w) for c in range(values.shape[2])], axis=-1)
    else:
        num = filt(values * w)
    den = filt(w)
    ok = valid & (den > 1e-12)
    den = np.where(ok, den, 1.0)
    out = num / (den[..., None] if values.ndim == 3 else den)
    return out, ok


def box_smooth(values, valid, radius: int):
    size = 2 * int(radius) + 1
    return masked_filter(
        values, valid, lambda a: ndimage.uniform_filter(a, size=size, mode="constant")
    )


def gaussian_smooth(values, valid, sigma: float):
    return masked_filter(
        values, valid, lambda a: ndimage.gaussian_filter(a, sigma=sigma, mode="constant")
    )
