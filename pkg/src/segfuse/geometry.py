"""LiDAR point clouds to registered dense depth maps.

Points transform into the camera frame by a rigid extrinsic, project through
a pinhole model onto pixel centers (round half away from zero), and land in
a z-buffer that keeps the nearest depth per pixel.  Sparse maps densify by
sliding-window max pooling with zero padding, per the standard automotive
preprocessing recipe.  Depth is meters in memory; the 16-bit millimeter PNG
encoding exists only at file boundaries.

All operations are pure; frames can be processed concurrently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .resize import resize_label, resize_nearest, resize_rgb

logger = logging.getLogger(__name__)

MAX_ENCODABLE_M = 65.535  # 16-bit millimeters


@dataclass(frozen=True)
class PointCloud:
    """N x (x, y, z[, intensity]) float32 records in the sensor frame, meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"point cloud must be (N, 3) or (N, 4), got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera-from-sensor rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("extrinsics must be a 3x3 rotation and a 3-vector translation")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def project_cloud(cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    """Z-buffer projection to a sparse (H, W) depth map; 0 means missing."""
    depth = np.zeros((cam.height, cam.width), dtype=np.float64)
    if len(cloud) == 0:
        return depth
    p = cloud.xyz.astype(np.float64) @ cam.rotation.T + cam.translation
    z = p[:, 2]
    front = z > 0
    p, z = p[front], z[front]
    if not len(z):
        return depth
    u = _round_half_away(cam.fx * p[:, 0] / z + cam.cx).astype(np.int64)
    v = _round_half_away(cam.fy * p[:, 1] / z + cam.cy).astype(np.int64)
    inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u, v, z = u[inside], v[inside], z[inside]
    if not len(z):
        return depth
    flat = depth.reshape(-1)
    flat.fill(np.inf)
    np.minimum.at(flat, v * cam.width + u, z)
    flat[~np.isfinite(flat)] = 0.0
    return depth


def densify_maxpool(depth: np.ndarray, window: int = 7, stride: int = 1,
                    fill: str = "max") -> np.ndarray:
    """Sliding window x window pooling with zero padding; size is unchanged.

    ``fill='max'`` is the literal recipe (the window max can favor farther
    points); ``fill='min_nonzero'`` keeps the nearest nonzero value instead,
    available behind this switch and off by default.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth map must be (H, W), got shape {depth.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if stride != 1:
        raise ValueError(f"stride is fixed at 1, got {stride}")
    if fill not in ("max", "min_nonzero"):
        raise ValueError(f"fill must be 'max' or 'min_nonzero', got {fill!r}")
    if window == 1:
        return depth.copy()
    r = window // 2
    if fill == "max":
        padded = np.pad(depth, r)
        return sliding_window_view(padded, (window, window)).max(axis=(2, 3))
    padded = np.pad(np.where(depth > 0, depth, np.inf), r, constant_values=np.inf)
    out = sliding_window_view(padded, (window, window)).min(axis=(2, 3))
    return np.where(np.isfinite(out), out, 0.0)


def crop_and_restore(rgb, label, depth, margins):
    """Crop identical per-edge margins off each aligned image, then resize
    back to the original size (bilinear for RGB, nearest for label/depth).

    ``margins`` is (top, bottom, left, right) or one int for all edges.
    Any of the three images may be None; present ones must share H x W.
    """
    if isinstance(margins, int):
        top = bottom = left = right = margins
    else:
        top, bottom, left, right = (int(m) for m in margins)
    if min(top, bottom, left, right) < 0:
        raise ValueError("margins must be non-negative")
    shapes = [im.shape[:2] for im in (rgb, label, depth) if im is not None]
    if not shapes:
        raise ValueError("crop_and_restore needs at least one image")
    if any(s != shapes[0] for s in shapes):
        raise ValueError(f"aligned images disagree on size: {shapes}")
    h, w = shapes[0]
    if top + bottom >= h or left + right >= w:
        raise ValueError(f"margins {(top, bottom, left, right)} too large for {h}x{w}")

    def cut(im):
        return im[top:h - bottom, left:w - right]

    out_rgb = None if rgb is None else resize_rgb(cut(np.asarray(rgb)), h, w)
    out_label = None if label is None else resize_label(cut(np.asarray(label)), h, w)
    out_depth = None if depth is None else resize_nearest(cut(np.asarray(depth)), h, w)
    return out_rgb, out_label, out_depth


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_point_cloud(path) -> PointCloud:
    """Read little-endian float32 records of x, y, z, intensity (16-byte stride)."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 16 bytes")
    return PointCloud(raw.reshape(-1, 4))


def save_point_cloud(path, cloud: PointCloud) -> None:
    pts = cloud.points
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1), dtype=np.float32)])
    pts.astype("<f4").tofile(path)


def load_calibration(path) -> CameraModel:
    """Parse a text calibration file.

    Rows: ``size <H> <W>``, ``intrinsics <fx> <fy> <cx> <cy>``, and
    ``extrinsics`` with the 12 row-major values of the 3x4 camera-from-sensor
    matrix.
    """
    fields = {}
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            key, values = parts[0], parts[1:]
            try:
                fields[key] = [float(v) for v in values]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {key!r} row") from None
    missing = {"size", "intrinsics", "extrinsics"} - set(fields)
    if missing:
        raise ValueError(f"{path}: missing rows {sorted(missing)}")
    if len(fields["size"]) != 2:
        raise ValueError(f"{path}: size row needs H W")
    if len(fields["intrinsics"]) != 4:
        raise ValueError(f"{path}: intrinsics row needs fx fy cx cy")
    if len(fields["extrinsics"]) != 12:
        raise ValueError(f"{path}: extrinsics row needs 12 values (3x4 row-major)")
    ext = np.array(fields["extrinsics"]).reshape(3, 4)
    fx, fy, cx, cy = fields["intrinsics"]
    h, w = (int(v) for v in fields["size"])
    return CameraModel(fx, fy, cx, cy, ext[:, :3], ext[:, 3], h, w)


def save_calibration(path, cam: CameraModel) -> None:
    ext = np.hstack([cam.rotation, cam.translation[:, None]])
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(f"size {cam.height} {cam.width}\n")
        fp.write("intrinsics " + " ".join(repr(float(v)) for v in
                                          (cam.fx, cam.fy, cam.cx, cam.cy)) + "\n")
        fp.write("extrinsics " + " ".join(repr(float(v)) for v in ext.reshape(-1)) + "\n")


def save_depth_png(path, depth_m: np.ndarray) -> None:
    """Write a single-channel 16-bit PNG in millimeters; 0 means missing.

    Depths beyond the encodable 65.535 m become 0/missing (and are logged).
    """
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2 or (depth_m < 0).any() or not np.isfinite(depth_m).all():
        raise ValueError("depth map must be a finite non-negative (H, W) array")
    mm = np.round(depth_m * 1000.0)
    over = mm > 65535
    if over.any():
        logger.warning("%s: %d depth pixels beyond %.3f m dropped to missing",
                       path, int(over.sum()), MAX_ENCODABLE_M)
        mm = np.where(over, 0, mm)
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel depth PNG")
    return arr.astype(np.float64) / 1000.0
