"""Analytic Lambertian scenes under a camera-fixed three-color light rig.

Serves as the ground-truth oracle for the whole pipeline: renders the
multispectral image together with exact depth, normals, region labels and
per-region mixing matrices, and fabricates SLAM-like semi-dense keyframes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    InverseDepthMap,
    MultispectralImage,
    NormalMap,
    pose_apply,
    pose_inverse,
)
from .ingest import KeyframeBundle

SHAPES = ("sphere", "plane", "heightfield")
LAYOUTS = ("uniform", "split")

DEFAULT_GRAD_THRESHOLD = 0.02


@dataclass(frozen=True)
class SceneSpec:
    """Analytic shape plus its chromatic albedo layout.

    shape parameters
        sphere: ``center``, ``radius``; plane: ``point``, ``normal``;
        heightfield: ``amplitude``, ``frequency`` of
        ``z = A sin(2 pi f x) sin(2 pi f y)``.

    ``albedo`` holds one RGB triple per region; with ``layout="split"`` points
    left of the shape's anchor (world x) are region 1, the rest region 2.
    ``texture`` is an achromatic multiplicative pattern of that amplitude; it
    leaves chromaticity untouched but gives the image edges for semi-dense
    sampling.
    """

    shape: str = "sphere"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    amplitude: float = 0.05
    frequency: float = 1.0
    albedo: tuple = ((0.8, 0.8, 0.8),)
    layout: str = "uniform"
    texture: float = 0.0
    texture_frequency: float = 4.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        alb = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
        if np.any(alb < 0) or np.any(alb > 1):
            raise ValueError("albedo components must lie in [0, 1]")
        if self.layout == "split" and len(alb) < 2:
            raise ValueError("split layout needs two albedo triples")
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1) > 1e-9:
            raise ValueError("plane normal must be unit length")
        if not 0 <= self.texture < 1:
            raise ValueError("texture amplitude must lie in [0, 1)")

    @property
    def n_regions(self) -> int:
        return 2 if self.layout == "split" else 1

    def region_albedo(self, region: int) -> np.ndarray:
        return np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)[region - 1]

    @property
    def anchor(self) -> np.ndarray:
        if self.shape == "sphere":
            return np.asarray(self.center, dtype=np.float64)
        if self.shape == "plane":
            return np.asarray(self.point, dtype=np.float64)
        return np.zeros(3)


@dataclass(frozen=True)
class LightRig:
    """Three directional lights fixed to the camera; light ``i`` feeds channel ``i``.

    ``directions`` are unit vectors in the camera frame pointing from the
    light toward the scene.
    """

    directions: np.ndarray
    intensities: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        L = np.asarray(self.directions, dtype=np.float64)
        E = np.asarray(self.intensities, dtype=np.float64)
        if L.shape != (3, 3) or E.shape != (3,):
            raise ValueError("a rig has exactly three lights")
        if np.any(np.abs(np.linalg.norm(L, axis=1) - 1) > 1e-9):
            raise ValueError("light directions must be unit vectors")
        if np.any(E < 0):
            raise ValueError("light intensities must be non-negative")
        object.__setattr__(self, "directions", L)
        object.__setattr__(self, "intensities", E)

    @classmethod
    def default(cls, slant_deg: float = 40.0, intensities=(1.0, 1.0, 1.0)) -> "LightRig":
        """Lights at azimuths 0/120/240 deg, ``slant_deg`` off the optical axis."""
        s = np.deg2rad(slant_deg)
        az = np.deg2rad([0.0, 120.0, 240.0])
        # unit vectors from the surface toward each light
        to_light = np.stack(
            [np.sin(s) * np.cos(az), np.sin(s) * np.sin(az), -np.cos(s) * np.ones(3)], axis=1
        )
        return cls(-to_light, np.asarray(intensities, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        """Rows ``E_i * (-l_i)``: channel response to a unit normal, unit albedo."""
        return self.intensities[:, None] * -self.directions

    def mixing(self, albedo) -> np.ndarray:
        """Exact mixing matrix ``diag(albedo) @ matrix`` for one region."""
        return np.asarray(albedo, dtype=np.float64)[:, None] * self.matrix


@dataclass(frozen=True)
class RenderResult:
    image: MultispectralImage
    depth: DepthMap
    normals: NormalMap
    shadow: np.ndarray
    regions: np.ndarray
    mixing: dict

    def __iter__(self):
        return iter((self.image, self.depth, self.normals))


def _cast_sphere(scene, o, d):
    c = np.asarray(scene.center, dtype=np.float64)
    oc = o - c
    a = np.einsum("ijk,ijk->ij", d, d)
    b = 2 * np.einsum("ijk,k->ij", d, oc)
    cc = oc @ oc - scene.radius**2
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    tau = (-b - sq) / (2 * a)
    tau_far = (-b + sq) / (2 * a)
    tau = np.where(tau > 0, tau, tau_far)
    hit &= tau > 0
    X = o + tau[..., None] * d
    n = (X - c) / scene.radius
    return hit, X, n


def _cast_plane(scene, o, d):
    p0 = np.asarray(scene.point, dtype=np.float64)
    nw = np.asarray(scene.normal, dtype=np.float64)
    denom = d @ nw
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = ((p0 - o) @ nw) / denom
    hit = np.isfinite(tau) & (tau > 0) & (np.abs(denom) > 1e-12)
    X = o + np.where(hit, tau, 0.0)[..., None] * d
    n = np.broadcast_to(nw, X.shape).copy()
    return hit, X, n


def _height(scene, x, y):
    w = 2 * np.pi * scene.frequency
    return scene.amplitude * np.sin(w * x) * np.sin(w * y)


def _cast_heightfield(scene, o, d, n_steps=400, n_bisect=50):
    A = abs(scene.amplitude)

    def g(tau):
        X = o + tau[..., None] * d
        return X[..., 2] - _height(scene, X[..., 0], X[..., 1])

    dz = d[..., 2]
    # march between the slab planes z = +A and z = -A
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(dz < 0, (A - o[2]) / dz, np.inf)
        t1 = np.where(dz < 0, (-A - o[2]) / dz, np.inf)
    t0 = np.maximum(t0, 0.0)
    usable = np.isfinite(t1) & (t1 > t0)
    t0 = np.where(usable, t0, 0.0)
    t1 = np.where(usable, t1, 1.0)

    lo = t0.copy()
    hi = t1.copy()
    found = np.zeros(dz.shape, bool)
    prev = g(t0)
    for k in range(1, n_steps + 1):
        t = t0 + (t1 - t0) * k / n_steps
        cur = g(t)
        cross = ~found & usable & (prev > 0) & (cur <= 0)
        hi = np.where(cross, t, hi)
        lo = np.where(cross, t0 + (t1 - t0) * (k - 1) / n_steps, lo)
        found |= cross
        prev = cur
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        above = g(mid) > 0
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    tau = 0.5 * (lo + hi)
    X = o + tau[..., None] * d
    w = 2 * np.pi * scene.frequency
    hx = scene.amplitude * w * np.cos(w * X[..., 0]) * np.sin(w * X[..., 1])
    hy = scene.amplitude * w * np.sin(w * X[..., 0]) * np.cos(w * X[..., 1])
    n = np.stack([-hx, -hy, np.ones_like(hx)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return found, X, n


def texture_factor(scene: SceneSpec, X) -> np.ndarray:
    if scene.texture == 0:
        return np.ones(X.shape[:-1])
    w = 2 * np.pi * scene.texture_frequency
    s = np.sin(w * X[..., 0]) + np.sin(w * X[..., 1]) + np.sin(w * X[..., 2])
    return 1.0 - scene.texture * (s + 3.0) / 6.0


def render_multispectral(
    scene: SceneSpec, rig: LightRig, intr: CameraIntrinsics, pose: CameraPose
) -> RenderResult:
    """Ray-cast ``scene`` from ``pose`` and shade it with the camera-fixed ``rig``.

    Channel ``i`` of a hit pixel is ``albedo_i * E_i * max(0, -l_i . n)``
    (times the achromatic texture).  Depth is the camera-frame z of the hit,
    normals are camera-frame and face the camera.  ``shadow`` flags hit pixels
    where any of the three clamps is active.  Iterating the result yields
    ``(image, depth, normals)``.
    """
    rays_c = intr.pixel_rays()
    R = pose.R
    o = np.asarray(pose.translation, dtype=np.float64)
    d = rays_c @ R.T

    if scene.shape == "sphere":
        hit, X, n_w = _cast_sphere(scene, o, d)
    elif scene.shape == "plane":
        hit, X, n_w = _cast_plane(scene, o, d)
    else:
        hit, X, n_w = _cast_heightfield(scene, o, d)

    inv = pose_inverse(pose)
    P_c = pose_apply(inv, X)
    hit &= P_c[..., 2] > 0
    n_c = n_w @ R
    facing = np.einsum("ijk,ijk->ij", n_c, P_c) > 0
    n_c[facing] *= -1
    n_c[~hit] = 0.0

    if scene.layout == "split":
        regions = np.where(X[..., 0] < scene.anchor[0], 1, 2)
    else:
        regions = np.ones(hit.shape, np.int64)
    regions = np.where(hit, regions, 0).astype(np.int64)

    cosines = n_c @ -rig.directions.T  # (H, W, 3): -l_i . n
    shadow = hit & np.any(cosines <= 0, axis=-1)
    albedo = np.zeros(hit.shape + (3,))
    mixing = {}
    for r in range(1, scene.n_regions + 1):
        rho = scene.region_albedo(r)
        albedo[regions == r] = rho
        mixing[r] = rig.mixing(rho)
    tex = texture_factor(scene, X)
    img = albedo * rig.intensities * np.maximum(cosines, 0.0) * tex[..., None]
    img[~hit] = 0.0

    depth = DepthMap(np.where(hit, P_c[..., 2], 0.0), hit)
    return RenderResult(
        MultispectralImage(img), depth, NormalMap(n_c, hit), shadow, regions, mixing
    )


def image_gradient(img: MultispectralImage) -> np.ndarray:
    """Gradient magnitude of the peak-normalized channel mean."""
    lum = img.data.mean(axis=-1)
    peak = lum.max()
    if peak > 0:
        lum = lum / peak
    gy, gx = np.gradient(lum)
    return np.hypot(gx, gy)


def make_semidense(
    depth_gt: DepthMap,
    img: MultispectralImage,
    grad_threshold: float = DEFAULT_GRAD_THRESHOLD,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> InverseDepthMap:
    """Inverse depth at strong-gradient pixels only, with Gaussian noise.

    The gradient is measured on the peak-normalized channel mean, so the
    threshold is unitless.  Pixels below the threshold are missing (NaN).
    """
    if grad_threshold < 0 or noise_sigma < 0:
        raise ValueError("thresholds must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, depth_gt.shape) * noise_sigma
    keep = depth_gt.valid & (image_gradient(img) >= grad_threshold)
    inv = np.full(depth_gt.shape, np.nan)
    inv[keep] = 1.0 / depth_gt.depth[keep] + noise[keep]
    return InverseDepthMap(inv)


def look_at(position, target, down=(0.0, -1.0, 0.0)) -> CameraPose:
    """Camera-to-world pose at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    y = np.asarray(down, dtype=np.float64)
    y = y - (y @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return CameraPose.from_matrix(np.column_stack([x, y, z]), position)


def generate_trajectory(
    n_keyframes: int, radius: float, target=(0.0, 0.0, 0.0), step_deg: float | None = None
) -> list[CameraPose]:
    """Poses on a circle in the world xz-plane, all looking at ``target``.

    The first pose sits at ``target + (0, 0, radius)`` looking down -z.
    Consecutive poses are ``step_deg`` apart (default: full circle / n).
    """
    if n_keyframes < 1:
        raise ValueError("need at least one keyframe")
    step = 360.0 / n_keyframes if step_deg is None else step_deg
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n_keyframes):
        th = np.deg2rad(k * step)
        pos = target + radius * np.array([np.sin(th), 0.0, np.cos(th)])
        poses.append(look_at(pos, target))
    return poses


@dataclass(frozen=True)
class SyntheticKeyframe:
    bundle: KeyframeBundle
    render: RenderResult


def make_keyframes(
    scene: SceneSpec,
    rig: LightRig,
    intr: CameraIntrinsics,
    poses,
    grad_threshold: float = DEFAULT_GRAD_THRESHOLD,
    noise: float = 0.0,
    seed: int = 0,
) -> list[SyntheticKeyframe]:
    """Render each pose and package it the way SLAM would hand it over.

    ``noise`` is the inverse-depth noise relative to the mean inverse depth.
    The stored inverse depth is normalized to a mean of one, and the keyframe
    pose carries the matching Sim(3) scale.
    """
    out = []
    for k, pose in enumerate(poses):
        r = render_multispectral(scene, rig, intr, pose)
        mean_inv = np.mean(1.0 / r.depth.depth[r.depth.valid]) if r.depth.valid.any() else 1.0
        inv = make_semidense(r.depth, r.image, grad_threshold, noise * mean_inv, seed + k)
        vals = inv.values
        ok = np.isfinite(vals) & (vals > 0)
        m = vals[ok].mean() if ok.any() else 1.0
        sim3 = CameraPose(pose.rotation, pose.translation, 1.0 / m)
        bundle = KeyframeBundle(k, r.image, InverseDepthMap(vals / m), sim3, 1.0 / m, intr)
        out.append(SyntheticKeyframe(bundle, r))
    return out


def save_keyframes(directory, keyframes, with_labels: bool = False):
    """Write synthetic keyframes as a bundle directory with a ``gt/`` folder.

    ``with_labels`` also writes the true region map as ``labels_%06d.png``.
    """
    from dataclasses import replace

    from .io import write_bundle

    bundles = []
    gt: dict = {}
    for kf in keyframes:
        b = kf.bundle
        if with_labels:
            b = replace(b, labels=kf.render.regions)
        bundles.append(b)
        r = kf.render
        gt[b.keyframe_id] = {
            "depth": np.where(r.depth.valid, r.depth.depth, np.nan),
            "normals": r.normals.normals,
            "shadow": r.shadow,
        }
        gt.setdefault("mixing", r.mixing)
    return write_bundle(directory, bundles, gt)
