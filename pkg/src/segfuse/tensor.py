"""Dense float64 tensor engine with taped reverse-mode gradients.

Feature maps are channels-first ``(C, H, W)`` float64 arrays.  Forward
primitives are pure functions; while a :class:`ComputationRecord` is active
(per thread), each primitive appends its backward rule to the tape, and
:func:`backward` replays the tape in reverse to fill ``.grad`` on every
watched tensor.  One training step owns one record; concurrent steps need
separate records (the active record is thread-local).
"""

from __future__ import annotations

import os
import struct
import threading
from typing import Callable, Optional, Sequence

import numpy as np

DUMP_MAGIC = b"SEGFTSR1"

_tls = threading.local()


def _active_record() -> Optional["ComputationRecord"]:
    return getattr(_tls, "record", None)


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``node_id`` is assigned by the active ComputationRecord the first time
    the tensor participates in a recorded operation (or via ``watch``).
    After ``backward``, each watched tensor's ``grad`` holds a float64 array
    of the same shape (zeros if the tensor never influenced the loss).
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the values with no gradient tracking."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op, input_ids, output_id, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        # Maps the output gradient to one gradient array (or None) per input.
        self.backward_fn = backward_fn


class ComputationRecord:
    """Tape of recorded primitive applications, in execution order.

    Use as a context manager around one forward pass::

        with ComputationRecord() as rec:
            rec.watch(param)
            loss = ...
            backward(loss)

    The tape is topologically ordered by construction; the reverse sweep
    visits each entry exactly once.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._tensors: list[Tensor] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "ComputationRecord":
        if _active_record() is not None:
            raise RuntimeError("a ComputationRecord is already active in this thread")
        _tls.record = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.record = None

    def _enroll(self, t: Tensor) -> int:
        if t.node_id is None or t.node_id >= len(self._tensors) or self._tensors[t.node_id] is not t:
            t.node_id = len(self._tensors)
            self._tensors.append(t)
        return t.node_id

    def watch(self, t: Tensor) -> None:
        """Register a leaf whose gradient must be materialized by backward."""
        if not t.requires_grad:
            raise ValueError("watch() expects a tensor with requires_grad=True")
        self._enroll(t)
        self._watched.append(t)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        input_ids = tuple(self._enroll(t) for t in inputs)
        output_id = self._enroll(output)
        self._entries.append(_Entry(op, input_ids, output_id, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self._tensors) or self._tensors[loss.node_id] is not loss:
            raise ValueError("backward() called on a tensor not produced under this record")
        grads: list[Optional[np.ndarray]] = [None] * len(self._tensors)
        grads[loss.node_id] = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            out_grad = grads[entry.output_id]
            if out_grad is None:
                continue
            for node_id, g in zip(entry.input_ids, entry.backward_fn(out_grad)):
                if g is None:
                    continue
                # accumulation never mutates in place, so views returned by
                # backward rules are safe to hold here
                grads[node_id] = g if grads[node_id] is None else grads[node_id] + g
        for t in self._watched:
            g = grads[t.node_id]
            t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)


def backward(loss: Tensor) -> None:
    """Reverse sweep of the active record, filling ``.grad`` on watched tensors."""
    rec = _active_record()
    if rec is None:
        raise ValueError("backward() requires an active ComputationRecord")
    rec.backward(loss)


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap a primitive result, recording its backward rule when tracked."""
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    rec = _active_record()
    if rec is not None and out.requires_grad:
        rec.record(op, inputs, out, backward_fn)
    return out


def _require_3d(t: Tensor, what: str) -> None:
    if t.data.ndim != 3:
        raise ValueError(f"{what} must be a (C, H, W) tensor, got shape {tuple(t.shape)}")


# ---------------------------------------------------------------------------
# forward primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: ``(C_in,H,W) -> (C_out,H',W')`` with square k in {1,3}."""
    _require_3d(x, "conv2d input")
    if weights.data.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"conv2d weights must be (C_out, C_in, k, k), got {tuple(weights.shape)}")
    k = weights.shape[2]
    if k not in (1, 3):
        raise ValueError(f"conv2d supports k in {{1, 3}}, got k={k}")
    if weights.shape[1] != x.shape[0]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, "
            f"weights expect {weights.shape[1]}"
        )
    if bias.data.ndim != 1 or bias.shape[0] != weights.shape[0]:
        raise ValueError(f"conv2d bias must be (C_out,) = ({weights.shape[0]},), got {tuple(bias.shape)}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    c_in, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d input {h}x{w} with padding {padding} is smaller than kernel {k}")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    c_out = weights.shape[0]

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = weights.data
    out = np.broadcast_to(bias.data[:, None, None], (c_out, out_h, out_w)).copy()
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, dy:dy + stride * (out_h - 1) + 1:stride,
                       dx:dx + stride * (out_w - 1) + 1:stride]
            out += np.tensordot(wd[:, :, dy, dx], patch, axes=([1], [0]))

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for dy in range(k):
            for dx in range(k):
                ys = slice(dy, dy + stride * (out_h - 1) + 1, stride)
                xs = slice(dx, dx + stride * (out_w - 1) + 1, stride)
                gxp[:, ys, xs] += np.tensordot(wd[:, :, dy, dx], g, axes=([0], [0]))
                gw[:, :, dy, dx] = np.tensordot(g, xp[:, ys, xs], axes=([1, 2], [1, 2]))
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, g.sum(axis=(1, 2))

    return _apply("conv2d", (x, weights, bias), out, backward_fn)


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise op: ``add``/``mul`` (binary, equal shapes or (C,1,1) channel
    broadcast for b), ``sigmoid``/``relu`` (unary)."""
    if kind in ("add", "mul"):
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        broadcast = False
        if a.shape != b.shape:
            ok = (a.data.ndim == 3 and b.data.ndim == 3
                  and b.shape[1] == 1 and b.shape[2] == 1 and b.shape[0] == a.shape[0])
            if not ok:
                raise ValueError(
                    f"elementwise '{kind}' shapes {tuple(a.shape)} and {tuple(b.shape)} "
                    "are neither equal nor (C,1,1)-broadcastable"
                )
            broadcast = True
        if kind == "add":
            out = a.data + b.data

            def backward_fn(g):
                gb = g.sum(axis=(1, 2), keepdims=True) if broadcast else g
                return g, gb
        else:
            ad, bd = a.data, b.data
            out = ad * bd

            def backward_fn(g):
                gb = g * ad
                if broadcast:
                    gb = gb.sum(axis=(1, 2), keepdims=True)
                return g * bd, gb

        return _apply(kind, (a, b), out, backward_fn)

    if b is not None:
        raise ValueError(f"elementwise '{kind}' is unary")
    if kind == "sigmoid":
        # saturated inputs overflow exp harmlessly: 1/(1+inf) == 0
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-a.data))

        def backward_fn(g, s=out):
            return (g * s * (1.0 - s),)

        return _apply(kind, (a,), out, backward_fn)
    if kind == "relu":
        mask = a.data > 0

        def backward_fn(g):
            return (g * mask,)

        return _apply(kind, (a,), np.where(mask, a.data, 0.0), backward_fn)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def sigmoid(a: Tensor) -> Tensor:
    return elementwise("sigmoid", a)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def log(a: Tensor) -> Tensor:
    """Natural log, pointwise.  Inputs must be positive for a finite result."""
    ad = a.data

    def backward_fn(g):
        return (g / ad,)

    return _apply("log", (a,), np.log(ad), backward_fn)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = a.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape),)

    return _apply("reduce_sum", (a,), np.asarray(a.data.sum()), backward_fn)


def reduce_mean_spatial(a: Tensor) -> Tensor:
    """Per-channel mean over H and W: ``(C,H,W) -> (C,1,1)``."""
    _require_3d(a, "reduce_mean_spatial input")
    _, h, w = a.shape
    n = h * w

    def backward_fn(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _apply("reduce_mean_spatial", (a,), a.data.mean(axis=(1, 2), keepdims=True), backward_fn)


def _pool_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    # region i covers [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)); regions may
    # overlap when n_out does not divide n_in
    return [(i * n_in // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def pooled_width(w: int, out_h: int, h: int) -> int:
    """Width paired with a pooled height: scaled in proportion, half-to-even."""
    return max(1, round(w * out_h / h))


def avg_pool_to_grid(a: Tensor, out_h: int) -> Tensor:
    """Adaptive average pooling to ``out_h`` rows; width scales in proportion."""
    _require_3d(a, "avg_pool_to_grid input")
    c, h, w = a.shape
    if out_h <= 0:
        raise ValueError(f"avg_pool_to_grid needs out_h >= 1, got {out_h}")
    if out_h > h:
        raise ValueError(f"avg_pool_to_grid out_h={out_h} exceeds input height {h}")
    out_w = pooled_width(w, out_h, h)
    rows = _pool_bounds(h, out_h)
    cols = _pool_bounds(w, out_w)
    out = np.empty((c, out_h, out_w))
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, i, j] = a.data[:, r0:r1, c0:c1].mean(axis=(1, 2))

    def backward_fn(g):
        gx = np.zeros_like(a.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, r0:r1, c0:c1] += g[:, i, j, None, None] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return _apply("avg_pool_to_grid", (a,), out, backward_fn)


def bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-center source coordinates for one axis.

    Returns ``(lo, hi, frac)`` where the resampled value is
    ``(1-frac)*x[lo] + frac*x[hi]``; source = (dst+0.5)*(n_in/n_out) - 0.5,
    clamped to the valid range.  ``n_out == n_in`` reproduces the input
    exactly.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, float(n_in - 1))
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel centers, ``(C,H,W) -> (C,out_h,out_w)``."""
    _require_3d(a, "bilinear_resize input")
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bilinear_resize output size must be positive, got {out_h}x{out_w}")
    c, h, w = a.shape
    r0, r1, fr = bilinear_axis(h, out_h)
    c0, c1, fc = bilinear_axis(w, out_w)
    wr0, wr1 = (1.0 - fr)[:, None], fr[:, None]
    wc0, wc1 = (1.0 - fc)[None, :], fc[None, :]
    ad = a.data
    out = (wr0 * (wc0 * ad[:, r0[:, None], c0[None, :]] + wc1 * ad[:, r0[:, None], c1[None, :]])
           + wr1 * (wc0 * ad[:, r1[:, None], c0[None, :]] + wc1 * ad[:, r1[:, None], c1[None, :]]))

    def backward_fn(g):
        gx = np.zeros_like(ad)
        np.add.at(gx, (slice(None), r0[:, None], c0[None, :]), wr0 * wc0 * g)
        np.add.at(gx, (slice(None), r0[:, None], c1[None, :]), wr0 * wc1 * g)
        np.add.at(gx, (slice(None), r1[:, None], c0[None, :]), wr1 * wc0 * g)
        np.add.at(gx, (slice(None), r1[:, None], c1[None, :]), wr1 * wc1 * g)
        return (gx,)

    return _apply("bilinear_resize", (a,), out, backward_fn)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack ``(C_i,H,W)`` tensors along channels, in argument order."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _require_3d(t, "concat_channels input")
    h, w = inputs[0].shape[1], inputs[0].shape[2]
    for t in inputs[1:]:
        if t.shape[1] != h or t.shape[2] != w:
            raise ValueError(
                f"concat_channels spatial mismatch: {tuple(t.shape)} vs expected (*, {h}, {w})"
            )
    sizes = [t.shape[0] for t in inputs]

    def backward_fn(g):
        parts = []
        start = 0
        for c in sizes:
            parts.append(g[start:start + c])
            start += c
        return parts

    return _apply("concat_channels", tuple(inputs), np.concatenate([t.data for t in inputs], axis=0),
                  backward_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradientCheckError(RuntimeError):
    """A non-finite value surfaced while probing gradients."""


def gradient_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``f`` must be a deterministic closure over ``params`` (a tensor or a
    sequence of tensors) returning a scalar tensor.  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step size h must be in [1e-7, 1e-4], got {h}")
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    with ComputationRecord() as rec:
        for p in params:
            rec.watch(p)
        loss = f()
        if loss.data.size != 1:
            raise ValueError(f"gradient_check needs a scalar program, got shape {tuple(loss.shape)}")
        backward(loss)
    analytic = [p.grad.reshape(-1).copy() for p in params]

    max_err = 0.0
    for p_idx, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = analytic[p_idx][i]
            if not (np.isfinite(numeric) and np.isfinite(exact)):
                raise GradientCheckError(
                    f"non-finite gradient at parameter {p_idx}, coordinate {i}: "
                    f"analytic={exact}, numeric={numeric}"
                )
            err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            if err > max_err:
                max_err = err
    return max_err


# ---------------------------------------------------------------------------
# binary dump (debug interchange format)
# ---------------------------------------------------------------------------

def dump_tensor(t: Tensor, dest) -> None:
    """Write little-endian binary: 8-byte magic, u32 rank, u32 dims, f64 data."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fp:
            dump_tensor(t, fp)
        return
    dest.write(DUMP_MAGIC)
    dest.write(struct.pack("<I", t.data.ndim))
    dest.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
    dest.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(src) -> Tensor:
    if isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as fp:
            return load_tensor(fp)
    magic = src.read(8)
    if magic != DUMP_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", src.read(4))
    dims = struct.unpack(f"<{rank}I", src.read(4 * rank))
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(src.read(8 * n), dtype="<f8").reshape(dims)
    return Tensor(data.copy())
