"""Two-branch RGB-D fusion segmentation network at toy scale.

The encoder downsamples by stride-2 stages with per-branch channel-attention
(SE) blocks and per-stage fusion; a pyramid-pooling block widens context at
the bottleneck; the decoder upsamples back to input resolution with
1x1-projected skip connections.  Five ablation variants share the topology:

* ``single_rgb``   - one branch, RGB input only
* ``rgbd_stack``   - one branch, RGB and depth stacked to a 4-channel input
* ``fusion_concat``- two branches, fused by channel concat + 1x1 conv
* ``fusion_add``   - two branches, fused by element-wise addition
* ``rgb_rgb_add``  - two branches, additive fusion, depth input replaced by RGB

Forward/evaluation paths are pure given frozen parameters; training is
single-threaded per model instance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .taxonomy import IGNORE_ID
from .tensor import Tensor

VARIANTS = ("single_rgb", "rgbd_stack", "fusion_concat", "fusion_add", "rgb_rgb_add")
TWO_BRANCH_VARIANTS = ("fusion_concat", "fusion_add", "rgb_rgb_add")

CHECKPOINT_MAGIC = b"SEGFCKP1"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training surfaced a non-finite loss; the step was aborted."""


@dataclass
class SEBlockParams:
    """1x1 conv + bias of a channel-attention block (square in/out channels)."""

    conv_weights: Tensor
    conv_bias: Tensor

    def __post_init__(self):
        w = self.conv_weights
        if w.data.ndim != 4 or w.shape[0] != w.shape[1] or w.shape[2:] != (1, 1):
            raise ValueError(f"SE conv must be (C, C, 1, 1), got {tuple(w.shape)}")

    @property
    def channels(self) -> int:
        return self.conv_weights.shape[0]


@dataclass
class FusionNetConfig:
    variant: str = "fusion_add"
    num_classes: int = 3
    stage_channels: tuple = (8, 16, 32)
    input_h: int = 64
    input_w: int = 64
    conflict_indices: frozenset = frozenset()
    eta: int = 1
    spp_heights: tuple = (4, 2, 1)

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.spp_heights = tuple(int(h) for h in self.spp_heights)
        self.conflict_indices = frozenset(int(i) for i in self.conflict_indices)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.num_classes < 1 or self.num_classes > 255:
            raise ValueError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if len(self.stage_channels) < 2:
            raise ValueError("need at least 2 encoder stages")
        if any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage channels must be positive, got {self.stage_channels}")
        stride = self.total_stride
        if self.input_h % stride or self.input_w % stride:
            raise ValueError(
                f"input {self.input_h}x{self.input_w} not divisible by total stride {stride}"
            )
        if self.eta not in (0, 1):
            raise ValueError(f"eta must be 0 or 1, got {self.eta}")
        bad = [i for i in self.conflict_indices if not 0 <= i < self.num_classes]
        if bad:
            raise ValueError(f"conflict indices {sorted(bad)} outside [0, {self.num_classes})")
        if len(self.conflict_indices) >= self.num_classes:
            raise ValueError("conflict set must leave at least one predictable class")
        bottleneck_h = self.input_h // stride
        if not self.spp_heights:
            raise ValueError("spp_heights must be non-empty")
        if any(h < 1 for h in self.spp_heights):
            raise ValueError(f"spp heights must be positive, got {self.spp_heights}")
        if max(self.spp_heights) > bottleneck_h:
            raise ValueError(
                f"spp height {max(self.spp_heights)} exceeds bottleneck height {bottleneck_h}"
            )

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def total_stride(self) -> int:
        return 1 << self.num_stages

    @property
    def two_branch(self) -> bool:
        return self.variant in TWO_BRANCH_VARIANTS

    @property
    def rgb_branch_in(self) -> int:
        return 4 if self.variant == "rgbd_stack" else 3

    @property
    def depth_branch_in(self) -> int:
        return 3 if self.variant == "rgb_rgb_add" else 1

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "num_classes": self.num_classes,
            "stage_channels": list(self.stage_channels),
            "input_h": self.input_h,
            "input_w": self.input_w,
            "conflict_indices": sorted(self.conflict_indices),
            "eta": self.eta,
            "spp_heights": list(self.spp_heights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionNetConfig":
        return cls(**d)


def _conv_shapes(config: FusionNetConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, weight shape) pairs for every conv in the network."""
    chans = config.stage_channels
    n_stages = config.num_stages
    shapes = []
    in_ch = config.rgb_branch_in
    for s, out_ch in enumerate(chans):
        shapes.append((f"enc_rgb{s}", (out_ch, in_ch, 3, 3)))
        shapes.append((f"se_rgb{s}", (out_ch, out_ch, 1, 1)))
        if config.two_branch:
            d_in = config.depth_branch_in if s == 0 else chans[s - 1]
            shapes.append((f"enc_depth{s}", (out_ch, d_in, 3, 3)))
            shapes.append((f"se_depth{s}", (out_ch, out_ch, 1, 1)))
            if config.variant == "fusion_concat":
                shapes.append((f"fuse{s}", (out_ch, 2 * out_ch, 1, 1)))
        in_ch = out_ch
    c_last = chans[-1]
    shapes.append(("spp_fuse", (c_last, (1 + len(config.spp_heights)) * c_last, 1, 1)))
    # decoder stage j upsamples x2 and consumes the skip recorded at the
    # matching resolution; the earliest skip is the branch input itself
    dec_in = c_last
    skip_chans = [config.rgb_branch_in] + list(chans[:-1])
    for j in range(n_stages):
        dec_out = chans[max(0, n_stages - 2 - j)]
        shapes.append((f"dec{j}_skip", (dec_in, skip_chans[n_stages - 1 - j], 1, 1)))
        shapes.append((f"dec{j}", (dec_out, dec_in, 3, 3)))
        dec_in = dec_out
    shapes.append(("classifier", (config.num_classes, dec_in, 1, 1)))
    return shapes


class NetworkParams:
    """All trainable tensors of one network, keyed ``<conv>_w`` / ``<conv>_b``."""

    def __init__(self, config: FusionNetConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)
        expected = []
        for name, shape in _conv_shapes(config):
            expected += [f"{name}_w", f"{name}_b"]
            w = self.tensors.get(f"{name}_w")
            b = self.tensors.get(f"{name}_b")
            if w is None or b is None:
                raise ValueError(f"missing parameters for conv {name!r}")
            if tuple(w.shape) != shape or tuple(b.shape) != (shape[0],):
                raise ValueError(
                    f"conv {name!r} expects weights {shape}, got {tuple(w.shape)}"
                )
        extra = set(self.tensors) - set(expected)
        if extra:
            raise ValueError(f"unexpected parameters: {sorted(extra)}")
        self._order = expected

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in self._order]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, self.tensors[k]) for k in self._order]

    def conv(self, name: str) -> tuple[Tensor, Tensor]:
        return self.tensors[f"{name}_w"], self.tensors[f"{name}_b"]

    def se(self, name: str) -> SEBlockParams:
        w, b = self.conv(name)
        return SEBlockParams(w, b)

    def copy(self) -> "NetworkParams":
        cloned = {}
        for k, t in self.tensors.items():
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            cloned[k] = c
        return NetworkParams(self.config, cloned)


def init_params(config: FusionNetConfig, seed: int = 0) -> NetworkParams:
    """Seeded uniform init in +-1/sqrt(fan_in) for every conv weight and bias."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _conv_shapes(config):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{name}_w"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        tensors[f"{name}_b"] = Tensor(rng.uniform(-bound, bound, size=shape[0]), requires_grad=True)
    return NetworkParams(config, tensors)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def se_block(x: Tensor, p: SEBlockParams) -> Tensor:
    """Rescale channels by sigmoid(1x1 conv(global mean pool)); shape-preserving."""
    if x.data.ndim != 3 or x.shape[0] != p.channels:
        raise ValueError(
            f"se_block channel mismatch: input {tuple(x.shape)} vs block C={p.channels}"
        )
    gate = T.sigmoid(T.conv2d(T.reduce_mean_spatial(x), p.conv_weights, p.conv_bias))
    return T.mul(x, gate)


def encoder_forward(rgb: Tensor, depth, config: FusionNetConfig,
                    params: NetworkParams):
    """Run the staged encoder; returns (bottleneck features, skip features).

    Skips are ordered earliest first: the branch input at full resolution,
    then each stage's fused output except the last (which is the bottleneck).
    """
    if tuple(rgb.shape) != (3, config.input_h, config.input_w):
        raise ValueError(
            f"rgb input must be (3, {config.input_h}, {config.input_w}), got {tuple(rgb.shape)}"
        )
    variant = config.variant
    if variant in ("fusion_add", "fusion_concat", "rgbd_stack"):
        if depth is None or tuple(depth.shape) != (1, config.input_h, config.input_w):
            got = None if depth is None else tuple(depth.shape)
            raise ValueError(
                f"depth input must be (1, {config.input_h}, {config.input_w}), got {got}"
            )

    if variant == "rgbd_stack":
        x_rgb = T.concat_channels([rgb, depth])
    else:
        x_rgb = rgb
    x_depth = rgb if variant == "rgb_rgb_add" else depth

    skips = [x_rgb]
    fused = x_rgb
    for s in range(config.num_stages):
        w, b = params.conv(f"enc_rgb{s}")
        r = T.relu(T.conv2d(fused, w, b, stride=2, padding=1))
        r = se_block(r, params.se(f"se_rgb{s}"))
        if config.two_branch:
            wd, bd = params.conv(f"enc_depth{s}")
            d = T.relu(T.conv2d(x_depth, wd, bd, stride=2, padding=1))
            x_depth = d  # depth branch continues from its own pre-SE features
            d = se_block(d, params.se(f"se_depth{s}"))
            if variant == "fusion_concat":
                fw, fb = params.conv(f"fuse{s}")
                fused = T.conv2d(T.concat_channels([r, d]), fw, fb)
            else:
                fused = T.add(r, d)
        else:
            fused = r
        if s < config.num_stages - 1:
            skips.append(fused)
    return fused, skips


def spp_concat(x: Tensor, heights) -> Tensor:
    """Pool to each height, resize back, and concat with the input: C -> (1+B)C."""
    _, h, w = x.shape
    branches = [x]
    for ph in heights:
        if ph > h:
            raise ValueError(f"pool height {ph} exceeds feature height {h}")
        branches.append(T.bilinear_resize(T.avg_pool_to_grid(x, ph), h, w))
    return T.concat_channels(branches)


def spp_forward(x: Tensor, params: NetworkParams) -> Tensor:
    w, b = params.conv("spp_fuse")
    return T.conv2d(spp_concat(x, params.config.spp_heights), w, b)


def decoder_forward(spp_out: Tensor, skips, params: NetworkParams) -> Tensor:
    """Upsample x2 per stage, add the projected skip, conv; then classify."""
    config = params.config
    n_stages = config.num_stages
    if len(skips) != n_stages:
        raise ValueError(f"expected {n_stages} skip features, got {len(skips)}")
    x = spp_out
    for j in range(n_stages):
        _, h, w = x.shape
        x = T.bilinear_resize(x, 2 * h, 2 * w)
        skip = skips[n_stages - 1 - j]
        if skip.shape[1:] != x.shape[1:]:
            raise ValueError(
                f"decoder stage {j}: skip size {tuple(skip.shape[1:])} does not match "
                f"upsampled size {tuple(x.shape[1:])}"
            )
        pw, pb = params.conv(f"dec{j}_skip")
        x = T.add(x, T.conv2d(skip, pw, pb))
        cw, cb = params.conv(f"dec{j}")
        x = T.relu(T.conv2d(x, cw, cb, stride=1, padding=1))
    cw, cb = params.conv("classifier")
    return T.conv2d(x, cw, cb)


def network_forward(rgb: Tensor, depth, params: NetworkParams) -> Tensor:
    """Full pass: encoder -> pyramid pooling -> decoder; logits (n, H, W)."""
    fused, skips = encoder_forward(rgb, depth, params.config, params)
    return decoder_forward(spp_forward(fused, params), skips, params)


# ---------------------------------------------------------------------------
# heads, loss, prediction
# ---------------------------------------------------------------------------

def softmax_pixelwise(logits: Tensor) -> Tensor:
    """Per-pixel softmax over channels, max-shifted for stability."""
    if logits.data.ndim != 3:
        raise ValueError(f"softmax expects (n, H, W) logits, got {tuple(logits.shape)}")
    z = logits.data
    e = np.exp(z - z.max(axis=0, keepdims=True))
    p = e / e.sum(axis=0, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return T._apply("softmax_pixelwise", (logits,), p, backward_fn)


def masked_softmax(logits: Tensor, conflict, eta: int) -> Tensor:
    """Softmax whose conflict channels are scaled by eta (1 = train, 0 = test).

    The denominator always runs over all classes, so with eta=0 the per-pixel
    sums drop below 1 by exactly the conflict mass; rankings among
    non-conflict classes are unaffected.
    """
    if eta not in (0, 1):
        raise ValueError(f"eta must be 0 or 1, got {eta}")
    n = logits.shape[0]
    conflict = frozenset(int(i) for i in conflict)
    bad = [i for i in conflict if not 0 <= i < n]
    if bad:
        raise ValueError(f"conflict indices {sorted(bad)} outside [0, {n})")
    p = softmax_pixelwise(logits)
    if not conflict or eta == 1:
        return p
    mask = np.ones((n, 1, 1))
    mask[sorted(conflict)] = float(eta)
    return T.mul(p, Tensor(mask))


def predict(logits: Tensor, conflict, mode: str = "test") -> np.ndarray:
    """Per-pixel argmax label map; test mode zeroes conflict channels first.

    Ties resolve to the lowest class index.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    eta = 1 if mode == "train" else 0
    probs = masked_softmax(logits, conflict, eta)
    return probs.data.argmax(axis=0).astype(np.uint8)


def loss_gated_ce(probabilities, labels, ignore_id: int = IGNORE_ID) -> Tensor:
    """Batch cross-entropy over per-pixel class probabilities.

    Pixels labeled ``ignore_id`` contribute nothing and are excluded from
    their sample's mean; a sample whose pixels are all ignored contributes
    exactly zero.  The batch result is the mean of per-sample losses.
    """
    if len(probabilities) == 0:
        raise ValueError("loss_gated_ce needs at least one sample")
    if len(probabilities) != len(labels):
        raise ValueError(f"{len(probabilities)} probability maps vs {len(labels)} label maps")
    count = len(probabilities)
    total = None
    for p, y in zip(probabilities, labels):
        n = p.shape[0]
        y = np.asarray(y)
        if y.shape != p.shape[1:]:
            raise ValueError(f"label shape {y.shape} does not match probabilities {tuple(p.shape)}")
        valid = y != ignore_id
        bad = np.unique(y[valid & (y >= n)])
        if bad.size:
            raise ValueError(
                f"label ids {bad.tolist()} outside [0, {n}) - relabeling bug?"
            )
        m = int(valid.sum())
        if m == 0:
            continue
        rows, cols = np.nonzero(valid)
        classes = y[rows, cols].astype(np.intp)
        term = _nll_term(p, classes, rows, cols, 1.0 / (count * m))
        total = term if total is None else T.add(total, term)
    if total is None:
        # every sample fully ignored: a recorded zero with zero gradients
        zero = Tensor(np.zeros_like(probabilities[0].data))
        total = T.reduce_sum(T.mul(probabilities[0], zero))
    return total


def _nll_term(p: Tensor, classes, rows, cols, coeff: float) -> Tensor:
    """Recorded primitive: ``-coeff * sum(log p[class, row, col])``."""
    pd = p.data
    picked = pd[classes, rows, cols]
    # a zero probability at a true-class pixel legitimately yields an
    # infinite loss, which the training loop treats as divergence
    with np.errstate(divide="ignore"):
        value = np.asarray(-coeff * np.log(picked).sum())

    def backward_fn(g):
        gp = np.zeros_like(pd)
        gp[classes, rows, cols] = -coeff / picked * g
        return (gp,)

    return T._apply("nll_pick", (p,), value, backward_fn)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(params: NetworkParams, batch, learning_rate: float):
    """One SGD step over a batch of (rgb, depth, label) samples.

    Returns ``(params, loss_value)``; parameters are updated in place.
    Raises :class:`NumericalError` before touching parameters if the loss is
    non-finite.
    """
    if learning_rate < 0:
        raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
    if not batch:
        raise ValueError("empty batch")
    config = params.config
    with T.ComputationRecord() as rec:
        for p in params.parameters():
            rec.watch(p)
        probs, labels = [], []
        for rgb, depth, label in batch:
            logits = network_forward(rgb, depth, params)
            probs.append(masked_softmax(logits, config.conflict_indices, config.eta))
            labels.append(label)
        loss = loss_gated_ce(probs, labels)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value}; step aborted")
        T.backward(loss)
    for p in params.parameters():
        p.data -= learning_rate * p.grad
    return params, value


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: NetworkParams) -> None:
    """Versioned binary checkpoint: magic, config echo, named tensor dumps."""
    blob = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        fp.write(struct.pack("<I", len(blob)))
        fp.write(blob)
        named = params.named_parameters()
        fp.write(struct.pack("<I", len(named)))
        for name, t in named:
            raw = name.encode()
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            T.dump_tensor(t, fp)


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fp:
        magic = fp.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fp.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fp.read(4))
        config = FusionNetConfig.from_dict(json.loads(fp.read(blob_len).decode()))
        (n_params,) = struct.unpack("<I", fp.read(4))
        tensors = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", fp.read(4))
            name = fp.read(name_len).decode()
            t = T.load_tensor(fp)
            t.requires_grad = True
            tensors[name] = t
    return NetworkParams(config, tensors)
