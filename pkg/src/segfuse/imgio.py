"""8-bit PNG I/O for RGB images and label maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_label_png(path, label: np.ndarray) -> None:
    label = np.asarray(label)
    if label.ndim != 2 or not np.issubdtype(label.dtype, np.integer):
        raise ValueError(f"label map must be integer (H, W), got {label.dtype} {label.shape}")
    if label.size and (label.min() < 0 or label.max() > 255):
        raise ValueError("label values must fit in uint8")
    Image.fromarray(label.astype(np.uint8), mode="L").save(_prepare(path), format="PNG")


def load_label_png(path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel label PNG, got shape {arr.shape}")
    return arr.astype(np.uint8)


def save_rgb_png(path, rgb: np.ndarray) -> None:
    """Write (H, W, 3); float inputs are treated as [0, 1] and quantized."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb image must be (H, W, 3), got shape {rgb.shape}")
    if np.issubdtype(rgb.dtype, np.floating):
        rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(_prepare(path), format="PNG")


def load_rgb_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.uint8)
