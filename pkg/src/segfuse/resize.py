"""Multi-dataset resizing policies with modality-aware interpolation.

Three policies: keep originals, normalize to a common width preserving
aspect ratio, or warp everything to one fixed size.  RGB resamples
bilinearly; label maps and depth maps use nearest neighbor so class ids
never blend and depth never bleeds across discontinuities.

All functions are pure and safe to run in parallel across samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import bilinear_axis

POLICY_KINDS = ("original_size", "same_width", "size_warping")

# published common-width sizes (h, w) for the four stock datasets at width 2048;
# the KITTI height is kept as published even though pure ratio scaling of
# 347x1241 gives 572
TABLE_SAME_WIDTH_SIZES = {
    "cityscapes": (1024, 2048),
    "lostandfound": (1024, 2048),
    "kitti": (622, 2048),
    "rellis3d": (1280, 2048),
}


@dataclass(frozen=True)
class ResizePolicy:
    kind: str = "original_size"
    target_h: int = 0
    target_w: int = 0
    overrides: dict = field(default_factory=lambda: dict(TABLE_SAME_WIDTH_SIZES))

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown resize policy {self.kind!r}, expected one of {POLICY_KINDS}")
        if self.kind == "same_width" and self.target_w <= 0:
            raise ValueError("same_width policy needs a positive target width")
        if self.kind == "size_warping" and (self.target_h <= 0 or self.target_w <= 0):
            raise ValueError("size_warping policy needs positive target height and width")
        for ds, (h, w) in self.overrides.items():
            if h <= 0 or w <= 0:
                raise ValueError(f"override for {ds!r} must be positive, got {h}x{w}")


def plan_size(policy: ResizePolicy, in_h: int, in_w: int, dataset: str = None) -> tuple:
    """Output (h, w) for one sample under the policy.

    Under ``same_width`` the height keeps the aspect ratio, rounded to the
    nearest even number so stride-2 encoders divide cleanly, unless the
    policy's override table pins an explicit size for ``dataset``.
    """
    if in_h <= 0 or in_w <= 0:
        raise ValueError(f"input size must be positive, got {in_h}x{in_w}")
    if policy.kind == "original_size":
        return in_h, in_w
    if policy.kind == "same_width":
        if dataset is not None and dataset in policy.overrides:
            return tuple(policy.overrides[dataset])
        out_h = 2 * round(in_h * policy.target_w / in_w / 2.0)
        return max(2, out_h), policy.target_w
    return policy.target_h, policy.target_w


def _nearest_axis(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.clip(idx, 0, n_in - 1)


def resize_rgb(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (H, W, C) image; returns float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"rgb image must be (H, W, C), got shape {img.shape}")
    h, w = img.shape[:2]
    r0, r1, fr = bilinear_axis(h, out_h)
    c0, c1, fc = bilinear_axis(w, out_w)
    wr0, wr1 = (1.0 - fr)[:, None, None], fr[:, None, None]
    wc0, wc1 = (1.0 - fc)[None, :, None], fc[None, :, None]
    return (wr0 * (wc0 * img[r0[:, None], c0[None, :]] + wc1 * img[r0[:, None], c1[None, :]])
            + wr1 * (wc0 * img[r1[:, None], c0[None, :]] + wc1 * img[r1[:, None], c1[None, :]]))


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of an (H, W) map; dtype is preserved."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel (H, W) map, got shape {img.shape}")
    rows = _nearest_axis(img.shape[0], out_h)
    cols = _nearest_axis(img.shape[1], out_w)
    return img[rows[:, None], cols[None, :]]


def resize_label(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return resize_nearest(label, out_h, out_w)


def resize_depth(depth: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return resize_nearest(depth, out_h, out_w)


def resize_sample(rgb: np.ndarray, depth: np.ndarray, label: np.ndarray, out_size: tuple):
    """Resize the three aligned modalities of one sample to ``(out_h, out_w)``."""
    rgb = np.asarray(rgb)
    depth = np.asarray(depth)
    label = np.asarray(label)
    if rgb.shape[:2] != depth.shape or depth.shape != label.shape:
        raise ValueError(
            f"modality size mismatch: rgb {rgb.shape[:2]}, depth {depth.shape}, "
            f"label {label.shape}"
        )
    out_h, out_w = out_size
    return (resize_rgb(rgb, out_h, out_w),
            resize_depth(depth, out_h, out_w),
            resize_label(label, out_h, out_w))
