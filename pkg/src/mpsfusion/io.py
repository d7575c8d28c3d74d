"""File formats: PFM, PNG, poses, intrinsics, PLY and keyframe bundle directories.

Bundle layout::

    image_%06d.png       8-bit RGB, linear (no gamma)
    invdepth_%06d.pfm    float32 inverse depth, NaN = missing
    labels_%06d.png      optional 16-bit segment labels
    poses.txt            id tx ty tz qx qy qz qw s  (camera-to-world)
    intrinsics.json      fx fy cx cy width height
    bundle.json          optional, records the 8-bit image scale
    gt/                  optional depth_*.pfm, normals_*.pfm, shadow_*.png, mixing.json
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, CameraPose, InverseDepthMap, MultispectralImage, PointCloud
from .exceptions import InputValidationError
from .ingest import KeyframeBundle

NO_NORMAL_COMMENT = "normals are zero for points without normal information"


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data) -> None:
    """Little-endian PFM, one (``Pf``) or three (``PF``) channels, top row first in memory."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {arr.shape}")
    H, W = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n")
        # PFM rows run bottom to top
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise InputValidationError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        W, H = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        raw = np.frombuffer(f.read(), dtype=dtype, count=W * H * channels)
    arr = raw.reshape((H, W, channels) if channels == 3 else (H, W))
    return arr[::-1].astype(np.float64)


# -- images -----------------------------------------------------------------

def write_image_png(path, image: MultispectralImage, scale: float | None = None) -> float:
    """Quantize to 8 bits as ``round(value / scale)``; returns the scale used."""
    data = image.data
    if scale is None:
        peak = float(data.max())
        scale = peak / 255.0 if peak > 0 else 1.0
    q = np.clip(np.rint(data / scale), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)
    return scale


def read_image_png(path, scale: float = 1.0 / 255.0) -> MultispectralImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return MultispectralImage(arr * scale)


def write_labels_png(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 65535:
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_labels_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def write_mask_png(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im) > 0


# -- poses and intrinsics ----------------------------------------------------

def write_poses(path, poses: dict[int, CameraPose]) -> None:
    lines = []
    for kf in sorted(poses):
        p = poses[kf]
        w, x, y, z = p.rotation
        tx, ty, tz = p.translation
        vals = [tx, ty, tz, x, y, z, w, p.scale]
        lines.append(f"{kf} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, CameraPose]:
    poses = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 9:
            raise InputValidationError(f"{path}:{n}: expected 9 fields, got {len(parts)}")
        kf = int(parts[0])
        tx, ty, tz, qx, qy, qz, qw, s = map(float, parts[1:])
        poses[kf] = CameraPose((qw, qx, qy, qz), (tx, ty, tz), s)
    return poses


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    d = json.loads(Path(path).read_text())
    try:
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )
    except KeyError as exc:
        raise InputValidationError(f"{path}: missing field {exc}") from None


# -- PLY --------------------------------------------------------------------

PLY_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue")
_PLY_ROW = "%.9g %.9g %.9g %.9g %.9g %.9g %d %d %d"


def write_ply(path, cloud: PointCloud, comments=()) -> None:
    """ASCII PLY with float x y z nx ny nz and uchar red green blue.

    Coordinates are stored as float32 printed with nine significant digits,
    which round-trips exactly.
    """
    n = len(cloud)
    P = cloud.positions.astype(np.float32).astype(np.float64)
    N = np.where(cloud.has_normal[:, None], cloud.normals, 0.0).astype(np.float32)
    if cloud.colors is None:
        rgb = np.full((n, 3), 255, np.int64)
    else:
        rgb = np.rint(cloud.colors * 255).astype(np.int64)
    n_missing = int(np.count_nonzero(~cloud.has_normal))
    header = ["ply", "format ascii 1.0", f"comment {NO_NORMAL_COMMENT}",
              f"comment points without normals: {n_missing}"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property float {k}" for k in PLY_PROPERTIES[:6]]
    header += [f"property uchar {k}" for k in PLY_PROPERTIES[6:]]
    header.append("end_header")
    columns = [*P.T.tolist(), *N.astype(np.float64).T.tolist(), *rgb.T.tolist()]
    body = "\n".join(_PLY_ROW % row for row in zip(*columns))
    with open(path, "w", newline="\n") as f:
        f.write("\n".join(header) + "\n")
        if n:
            f.write(body + "\n")


def read_ply(path) -> PointCloud:
    """Read the vertex positions (and normals, colors if present) of an ASCII PLY."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise InputValidationError(f"{path}: not a PLY file")
        names, count, in_vertex, fmt = [], None, False, None
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    count = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                if parts[1] == "list":
                    raise InputValidationError(f"{path}: list properties on vertices unsupported")
                names.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if fmt != "ascii":
            raise InputValidationError(f"{path}: only ASCII PLY is supported, got {fmt}")
        if count is None or not all(k in names for k in "xyz"):
            raise InputValidationError(f"{path}: no vertex element with x y z")
        data = np.loadtxt(f, max_rows=count, ndmin=2) if count else np.zeros((0, len(names)))
    if data.shape != (count, len(names)):
        raise InputValidationError(f"{path}: expected {count} vertices of {len(names)} values")
    # "property float" values are float32 on disk
    col = {k: data[:, i].astype(np.float32).astype(np.float64) for i, k in enumerate(names)}
    P = np.stack([col["x"], col["y"], col["z"]], axis=1)
    normals = colors = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
    if all(k in col for k in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1) / 255.0
    return PointCloud(P, normals, colors=colors)


# -- bundles ----------------------------------------------------------------

def _ids(directory: Path, prefix: str, suffix: str) -> list[int]:
    pat = re.compile(rf"^{prefix}_(\d+){re.escape(suffix)}$")
    return sorted(int(m.group(1)) for p in directory.iterdir() if (m := pat.match(p.name)))


def write_bundle(directory, keyframes, ground_truth=None) -> Path:
    """Write :class:`KeyframeBundle` objects (and optional ground truth).

    ``ground_truth`` maps keyframe id to a dict with ``depth`` (H, W),
    ``normals`` (H, W, 3) and optionally ``shadow`` (H, W); the key
    ``"mixing"`` may hold ``{region: 3x3}``.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    peak = max(float(kf.image.data.max()) for kf in keyframes) if keyframes else 0.0
    scale = peak / 255.0 if peak > 0 else 1.0 / 255.0
    poses = {}
    for kf in keyframes:
        i = kf.keyframe_id
        write_image_png(out / f"image_{i:06d}.png", kf.image, scale)
        write_pfm(out / f"invdepth_{i:06d}.pfm", kf.inverse_depth.values)
        if kf.labels is not None:
            write_labels_png(out / f"labels_{i:06d}.png", kf.labels)
        poses[i] = CameraPose(kf.pose.rotation, kf.pose.translation, kf.scale)
    write_poses(out / "poses.txt", poses)
    if keyframes:
        write_intrinsics(out / "intrinsics.json", keyframes[0].intrinsics)
    (out / "bundle.json").write_text(json.dumps({"image_scale": scale}, indent=2) + "\n")

    if ground_truth:
        gt = out / "gt"
        gt.mkdir(exist_ok=True)
        for key, rec in ground_truth.items():
            if key == "mixing":
                continue
            write_pfm(gt / f"depth_{key:06d}.pfm", rec["depth"])
            write_pfm(gt / f"normals_{key:06d}.pfm", rec["normals"])
            if rec.get("shadow") is not None:
                write_mask_png(gt / f"shadow_{key:06d}.png", rec["shadow"])
        if "mixing" in ground_truth:
            mixing = {str(r): np.asarray(M).tolist() for r, M in ground_truth["mixing"].items()}
            (gt / "mixing.json").write_text(json.dumps({"regions": mixing}, indent=2) + "\n")
    return out


def read_bundle(directory) -> list[KeyframeBundle]:
    """Load every keyframe of a bundle directory, ordered by id.

    Raises
    ------
    InputValidationError
        Missing directory, no keyframes, or inconsistent files.
    """
    d = Path(directory)
    if not d.is_dir():
        raise InputValidationError(f"bundle directory {d} does not exist")
    ids = _ids(d, "image", ".png")
    if not ids:
        raise InputValidationError(f"bundle directory {d} holds no image_*.png keyframes")
    for name in ("poses.txt", "intrinsics.json"):
        if not (d / name).is_file():
            raise InputValidationError(f"bundle directory {d} lacks {name}")
    poses = read_poses(d / "poses.txt")
    intr = read_intrinsics(d / "intrinsics.json")
    scale = 1.0 / 255.0
    if (d / "bundle.json").is_file():
        scale = float(json.loads((d / "bundle.json").read_text()).get("image_scale", scale))

    bundles = []
    for i in ids:
        if i not in poses:
            raise InputValidationError(f"keyframe {i} has no entry in poses.txt")
        inv_path = d / f"invdepth_{i:06d}.pfm"
        if not inv_path.is_file():
            raise InputValidationError(f"keyframe {i} lacks {inv_path.name}")
        labels = None
        if (d / f"labels_{i:06d}.png").is_file():
            labels = read_labels_png(d / f"labels_{i:06d}.png")
        pose = poses[i]
        try:
            bundles.append(KeyframeBundle(
                i,
                read_image_png(d / f"image_{i:06d}.png", scale),
                InverseDepthMap(read_pfm(inv_path)),
                pose,
                pose.scale,
                intr,
                labels,
            ))
        except ValueError as exc:
            raise InputValidationError(str(exc)) from exc
    return bundles


def read_ground_truth(directory, keyframe_id: int) -> dict | None:
    """Ground-truth depth, normals and shadow mask for one keyframe, if present."""
    gt = Path(directory) / "gt"
    depth_path = gt / f"depth_{keyframe_id:06d}.pfm"
    if not depth_path.is_file():
        return None
    rec = {"depth": read_pfm(depth_path)}
    if (gt / f"normals_{keyframe_id:06d}.pfm").is_file():
        rec["normals"] = read_pfm(gt / f"normals_{keyframe_id:06d}.pfm")
    if (gt / f"shadow_{keyframe_id:06d}.png").is_file():
        rec["shadow"] = read_mask_png(gt / f"shadow_{keyframe_id:06d}.png")
    return rec


def read_mixing(directory) -> dict[int, np.ndarray]:
    path = Path(directory) / "gt" / "mixing.json"
    if not path.is_file():
        return {}
    d = json.loads(path.read_text())
    return {int(r): np.asarray(M, dtype=np.float64) for r, M in d["regions"].items()}
