"""Geometry and image primitives shared by every stage.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)``.
* A :class:`CameraPose` maps camera-frame coordinates into the world frame
  (``p_world = s * R @ p_cam + t``).
* Camera frame: +z forward, +x right, +y down.
* Invalid depth is stored as 0 together with an explicit boolean mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonPositiveScale, NonUnitQuaternion

QUAT_RENORM_TOL = 1e-6
QUAT_REJECT_TOL = 1e-2


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``.

    Inputs whose norm is off by less than 1e-2 are renormalized first;
    anything worse raises :class:`NonUnitQuaternion`.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or abs(norm - 1.0) > QUAT_REJECT_TOL:
        raise NonUnitQuaternion(f"quaternion norm {norm:.6g} is not close to 1")
    if abs(norm - 1.0) > QUAT_RENORM_TOL:
        q = q / norm
    w, x, y, z = q
    return np.array(
        [
            [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` of two ``(w, x, y, z)`` quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True)
class CameraPose:
    """Sim(3) camera-to-world pose: rotation quaternion, translation, scale."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        # validates and renormalizes in one place
        quat_to_rotation(q)
        q = q / np.linalg.norm(q)
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {t.shape}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise NonPositiveScale(f"pose scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t, scale: float = 1.0) -> "CameraPose":
        return cls(rotation_to_quat(R), t, scale)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotation(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix ``[[sR, t], [0, 1]]``."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.R
        m[:3, 3] = self.translation
        return m

    def rigid(self) -> "CameraPose":
        """Same rotation and translation with the scale dropped."""
        return CameraPose(self.rotation, self.translation, 1.0)

    def apply(self, points) -> np.ndarray:
        return pose_apply(self, points)

    def inverse(self) -> "CameraPose":
        return pose_inverse(self)

    def __matmul__(self, other: "CameraPose") -> "CameraPose":
        return pose_compose(self, other)


def pose_apply(pose: CameraPose, p) -> np.ndarray:
    """``s * R @ p + t`` for a single point or an ``(N, 3)`` array."""
    p = np.asarray(p, dtype=np.float64)
    return pose.scale * (p @ pose.R.T) + pose.translation


def pose_compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose equivalent to applying ``b`` first, then ``a``."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.scale * (a.R @ b.translation) + a.translation
    return CameraPose(q / np.linalg.norm(q), t, a.scale * b.scale)


def pose_inverse(a: CameraPose) -> CameraPose:
    w, x, y, z = a.rotation
    q_inv = np.array([w, -x, -y, -z])
    t = -(a.R.T @ a.translation) / a.scale
    return CameraPose(q_inv, t, 1.0 / a.scale)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_rays(self) -> np.ndarray:
        """``(H, W, 3)`` rays ``((u - cx)/fx, (v - cy)/fy, 1)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates ``(u, v)`` of camera-frame points."""
        p = np.asarray(points, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[..., 0] / p[..., 2] + self.cx
            v = self.fy * p[..., 1] / p[..., 2] + self.cy
        return u, v

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class MultispectralImage:
    """``(H, W, 3)`` linear radiance, one channel per colored light."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("image radiances must be finite and non-negative")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth with validity; invalid pixels hold exactly 0.

    ``interpolated`` flags pixels whose value was produced by hole filling.
    """

    depth: np.ndarray
    valid: np.ndarray | None = None
    interpolated: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
        valid = (np.isfinite(d) & (d > 0)) if self.valid is None else np.asarray(self.valid, bool)
        if valid.shape != d.shape:
            raise ValueError("validity mask shape does not match depth")
        if np.any(~np.isfinite(d[valid])) or np.any(d[valid] <= 0):
            raise ValueError("valid depths must be finite and positive")
        d = np.where(valid, d, 0.0)
        interp = (
            np.zeros_like(valid) if self.interpolated is None
            else np.asarray(self.interpolated, bool) & valid
        )
        object.__setattr__(self, "depth", _frozen(d))
        object.__setattr__(self, "valid", _frozen(valid, bool))
        object.__setattr__(self, "interpolated", _frozen(interp, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class InverseDepthMap:
    """Raw SLAM inverse depth; NaN marks a missing estimate."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"inverse depth map must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class NormalMap:
    """Per-pixel unit normals in the camera frame with validity."""

    normals: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.normals, dtype=np.float64)
        if n.ndim != 3 or n.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) normals, got shape {n.shape}")
        norm = np.linalg.norm(n, axis=-1)
        if self.valid is None:
            valid = np.isfinite(norm) & (norm > 0)
        else:
            valid = np.asarray(self.valid, bool)
        if valid.shape != n.shape[:2]:
            raise ValueError("validity mask shape does not match normals")
        out = np.zeros_like(n)
        out[valid] = n[valid] / norm[valid, None]
        object.__setattr__(self, "normals", _frozen(out))
        object.__setattr__(self, "valid", _frozen(valid, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.normals.shape[:2]


@dataclass(frozen=True)
class PointCloud:
    """Positions with optional per-point normals, colors and keyframe ids.

    ``has_normal`` marks which rows of ``normals`` are meaningful; rows without
    a normal are stored as zeros.  ``keyframe`` is -1 when unknown.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    has_normal: np.ndarray | None = None
    colors: np.ndarray | None = None
    keyframe: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point positions must be finite")
        n_pts = len(p)
        if self.normals is None:
            nrm = np.zeros((n_pts, 3))
            has = np.zeros(n_pts, bool)
        else:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            length = np.linalg.norm(nrm, axis=1)
            has = (length > 0) if self.has_normal is None else np.asarray(self.has_normal, bool)
            has = has & np.isfinite(length) & (length > 0)
            nrm = np.where(has[:, None], nrm / np.where(length > 0, length, 1)[:, None], 0.0)
        if len(nrm) != n_pts:
            raise ValueError("normals and positions differ in length")
        col = None
        if self.colors is not None:
            col = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
            if len(col) != n_pts:
                raise ValueError("colors and positions differ in length")
            col = _frozen(col)
        kf = (
            np.full(n_pts, -1, np.int64) if self.keyframe is None
            else np.broadcast_to(np.asarray(self.keyframe, np.int64), (n_pts,))
        )
        object.__setattr__(self, "positions", _frozen(p))
        object.__setattr__(self, "normals", _frozen(nrm))
        object.__setattr__(self, "has_normal", _frozen(has, bool))
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "keyframe", _frozen(kf, np.int64))

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.positions[idx],
            self.normals[idx],
            self.has_normal[idx],
            None if self.colors is None else self.colors[idx],
            self.keyframe[idx],
        )

    def transformed(self, pose: CameraPose) -> "PointCloud":
        """Positions mapped by ``pose``; normals rotated by its rotation."""
        return PointCloud(
            pose_apply(pose, self.positions),
            self.normals @ pose.R.T,
            self.has_normal,
            self.colors,
            self.keyframe,
        )

    @staticmethod
    def concatenate(clouds) -> "PointCloud":
        clouds = [c for c in clouds]
        if not clouds:
            return PointCloud.empty()
        with_colors = all(c.colors is not None for c in clouds)
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.normals for c in clouds]),
            np.concatenate([c.has_normal for c in clouds]),
            np.concatenate([c.colors for c in clouds]) if with_colors else None,
            np.concatenate([c.keyframe for c in clouds]),
        )
