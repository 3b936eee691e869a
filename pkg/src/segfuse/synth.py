"""Seeded synthetic RGB-D scenes for toy training and evaluation.

Each scene has three classes on a noisy flat-depth background:

* ``background``  - muted color, far plane
* ``painted``     - a panel with a distinct color but background depth, so it
                    is only visible photometrically
* ``camouflaged`` - a panel whose color matches the background distribution
                    but which sits much nearer, so only depth reveals it

The camouflaged class directly probes whether a model exploits the depth
input: an RGB-only network cannot separate it from background.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

CLASS_NAMES = ("background", "painted", "camouflaged")

BACKGROUND_COLOR = (0.35, 0.45, 0.40)
PAINTED_COLOR = (0.90, 0.20, 0.15)
COLOR_NOISE = 0.04
BACKGROUND_DEPTH_M = 40.0
CAMOUFLAGED_DEPTH_M = 8.0
DEPTH_NOISE_M = 0.4

DEPTH_SCALE = 0.01  # meters -> network input units


def generate_scene(rng: np.random.Generator, h: int, w: int):
    """One (rgb [3,h,w] in [0,1], depth_m [h,w], label [h,w]) triple."""
    rgb = np.empty((3, h, w))
    for c, base in enumerate(BACKGROUND_COLOR):
        rgb[c] = base + rng.normal(0.0, COLOR_NOISE, size=(h, w))
    depth = BACKGROUND_DEPTH_M + rng.normal(0.0, DEPTH_NOISE_M, size=(h, w))
    label = np.zeros((h, w), dtype=np.uint8)

    def place(class_id):
        side = int(rng.integers(h // 3, h // 2 + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        region = (slice(top, top + side), slice(left, left + side))
        if class_id == 1:
            for c, base in enumerate(PAINTED_COLOR):
                rgb[c][region] = base + rng.normal(0.0, COLOR_NOISE, size=(side, side))
        else:
            for c, base in enumerate(BACKGROUND_COLOR):
                rgb[c][region] = base + rng.normal(0.0, COLOR_NOISE, size=(side, side))
            depth[region] = CAMOUFLAGED_DEPTH_M + rng.normal(0.0, DEPTH_NOISE_M,
                                                             size=(side, side))
        label[region] = class_id

    place(1)
    place(2)
    return np.clip(rgb, 0.0, 1.0), np.clip(depth, 0.0, None), label


def generate_dataset(seed: int, count: int, h: int, w: int) -> list:
    """Deterministic list of scenes for one split."""
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, h, w) for _ in range(count)]


def to_network_inputs(scene, depth_scale: float = DEPTH_SCALE):
    """(rgb, depth_m, label) -> (rgb Tensor, scaled depth Tensor, label)."""
    rgb, depth_m, label = scene
    return Tensor(rgb), Tensor((depth_m * depth_scale)[None, :, :]), label
