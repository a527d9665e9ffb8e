"""Primitive operations with forward and gradient definitions.

Activations are laid out (batch, channels, height, width).  Every function
returns a :class:`~stmbr.tensor.Tensor`; gradients are recorded only when an
input requires them and recording is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


@dataclass
class ConvSpec:
    """Kernel, bias and geometry of a 2-D convolution.

    ``padding`` is (top, bottom, left, right) zero padding.
    """

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if len(self.padding) != 4 or min(self.padding) < 0:
            raise ValueError("padding must be four non-negative integers")
        if self.kernel.ndim != 4:
            raise ValueError("kernel must be (out_ch, in_ch, kh, kw)")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias must have one entry per output channel")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        _, _, kh, kw = self.kernel.shape
        pt, pb, pl, pr = self.padding
        ho = (h + pt + pb - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + pl + pr - self.dilation * (kw - 1) - 1) // self.stride + 1
        return ho, wo


def same_padding(kernel: int, dilation: int = 1) -> tuple[int, int, int, int]:
    """Padding that keeps spatial size at stride 1; the extra row/col of an even
    kernel goes at the bottom/right."""
    total = dilation * (kernel - 1)
    lo = total // 2
    hi = total - lo
    return (lo, hi, lo, hi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_result(out, (x,), backward, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return make_result(out.copy(), (x,), backward, "slice_channels")


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        # gradient at exactly 0 is 0
        return (g * mask,)

    return make_result(out, (x,), backward, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), backward, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Softmax along ``axis`` (classes), stabilised by max-subtraction."""
    z = logits.data
    if np.isnan(z).any():
        raise FloatingPointError("softmax input contains NaN")
    if z.shape[axis] < 2:
        raise ValueError("softmax needs at least two classes")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return make_result(p, (logits,), backward, "softmax")


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero where the floor is active."""
    active = x.data > floor
    out = np.log(np.maximum(x.data, floor))

    def backward(g):
        return (np.where(active, g / np.maximum(x.data, floor), 0).astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "log")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must satisfy 0 <= rate < 1")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return make_result(out, (x,), backward, "dropout")


# --------------------------------------------------------------------------
# linear layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"dense: bias {bias.shape} must be ({weights.shape[1]},)")
    out = x.data @ weights.data + bias.data

    def backward(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return make_result(out, (x, weights, bias), backward, "dense")


def _tap_slices(i: int, j: int, spec_stride: int, dilation: int, ho: int, wo: int):
    r0 = i * dilation
    c0 = j * dilation
    return (
        slice(r0, r0 + spec_stride * (ho - 1) + 1, spec_stride),
        slice(c0, c0 + spec_stride * (wo - 1) + 1, spec_stride),
    )


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Dilated, strided 2-D convolution (cross-correlation) with zero padding."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    kern, bias = spec.kernel, spec.bias
    o, ci, kh, kw = kern.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size {(ho, wo)} for input {(h, w)}")
    pt, pb, pl, pr = spec.padding
    s, d = spec.stride, spec.dilation
    xp = _pad(x.data, spec.padding)
    pointwise = kh == kw == 1 and s == 1

    # cols: (N, C*kh*kw, Ho*Wo) with (c, i, j) ordering matching kernel.reshape(O, -1)
    if pointwise:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                rs, cs = _tap_slices(i, j, s, d, ho, wo)
                cols[:, :, i, j] = xp[:, :, rs, cs]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = kern.data.reshape(o, -1)
    out = np.matmul(wmat, cols) + bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kern.shape)
        gb = g2.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            if pointwise:
                gxp = gcols.reshape(xp.shape)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        rs, cs = _tap_slices(i, j, s, d, ho, wo)
                        gxp[:, :, rs, cs] += gcols[:, :, i, j]
            gx = gxp[:, :, pt : pt + h, pl : pl + w]
            if any(spec.padding):
                gx = gx.copy()
        return gx, gk.astype(kern.dtype, copy=False), gb.astype(bias.dtype, copy=False)

    return make_result(out, (x, kern, bias), backward, "conv2d")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {p.shape} incompatible with {ref}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(parts)))

    return make_result(out, parts, backward, "concat_channels")


# --------------------------------------------------------------------------
# pooling


@dataclass
class PoolIndices:
    """Row-major flat argmax positions into each (H, W) plane of the pooled input."""

    indices: np.ndarray
    input_shape: tuple[int, int, int, int]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indices.shape


def _pad(x: np.ndarray, padding, fill: float = 0.0) -> np.ndarray:
    pt, pb, pl, pr = padding
    if not (pt or pb or pl or pr):
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + pt + pb, w + pl + pr), fill, dtype=x.dtype)
    out[:, :, pt : pt + h, pl : pl + w] = x
    return out


def pool2d(
    x: Tensor,
    window: int = 2,
    stride: int = 2,
    mode: str = "max",
    padding: tuple[int, int, int, int] = (0, 0, 0, 0),
) -> tuple[Tensor, PoolIndices | None]:
    """Max or average pooling.  Max mode also returns argmax indices (first
    occurrence on ties, row-major scan); average divides by window**2,
    padded zeros included."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    n, c, h, w = x.shape
    pt, pb, pl, pr = padding
    hp, wp = h + pt + pb, w + pl + pr
    if window > hp or window > wp:
        raise ValueError(f"pool window {window} larger than padded input {(hp, wp)}")
    ho = (hp - window) // stride + 1
    wo = (wp - window) // stride + 1
    xp = _pad(x.data, padding, -np.inf if mode == "max" else 0.0)
    taps = [(i, j) for i in range(window) for j in range(window)]
    plane = h * w

    if mode == "avg":
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i, j in taps:
            rs, cs = _tap_slices(i, j, stride, 1, ho, wo)
            out += xp[:, :, rs, cs]
        scale = 1.0 / (window * window)
        out *= scale

        def backward(g):
            gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
            gs = g * scale
            for i, j in taps:
                rs, cs = _tap_slices(i, j, stride, 1, ho, wo)
                gxp[:, :, rs, cs] += gs
            return (gxp[:, :, pt : pt + h, pl : pl + w].copy(),)

        return make_result(out, (x,), backward, "avg_pool2d"), None

    rs, cs = _tap_slices(0, 0, stride, 1, ho, wo)
    out = xp[:, :, rs, cs].copy()
    local = np.zeros((n, c, ho, wo), dtype=np.int64)
    for k, (i, j) in enumerate(taps[1:], start=1):
        rs, cs = _tap_slices(i, j, stride, 1, ho, wo)
        tap = xp[:, :, rs, cs]
        better = tap > out  # strict: earlier taps win ties
        np.copyto(out, tap, where=better)
        np.copyto(local, k, where=better)
    li, lj = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + li - pt
    cols = np.arange(wo)[None, :] * stride + lj - pl
    idx = rows * w + cols
    offsets = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1, 1)
    flat = (idx + offsets).ravel()

    def backward(g):
        gx = np.bincount(flat, weights=g.ravel(), minlength=n * c * plane)
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return make_result(out, (x,), backward, "max_pool2d"), PoolIndices(idx, (n, c, h, w))


def max_unpool2d(values: Tensor, indices: PoolIndices, out_shape: Sequence[int] | None = None) -> Tensor:
    """Scatter pooled values back to their argmax positions; zeros elsewhere."""
    out_shape = tuple(out_shape) if out_shape is not None else indices.input_shape
    n, c, h, w = out_shape
    if values.shape != indices.shape:
        raise ValueError(f"unpool: values {values.shape} and indices {indices.shape} disagree")
    if values.shape[:2] != (n, c):
        raise ValueError(f"unpool: values {values.shape} do not match out_shape {out_shape}")
    plane = h * w
    idx = indices.indices
    if idx.size and (idx.min() < 0 or idx.max() >= plane):
        raise IndexError("unpool: index out of range for out_shape")
    offsets = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1, 1)
    flat = (idx + offsets).ravel()
    out = np.zeros(n * c * plane, dtype=values.dtype)
    out[flat] = values.data.ravel()

    def backward(g):
        return (g.ravel()[flat].reshape(values.shape),)

    return make_result(out.reshape(out_shape), (values,), backward, "max_unpool2d")


# --------------------------------------------------------------------------
# losses


def cross_entropy(probs: Tensor, targets, class_weights=None) -> Tensor:
    """Mean over samples (and pixels) of -sum_c w_c t_c log(max(p_c, 1e-12)).

    ``targets`` is either an integer index array of shape (N,) / (N, H, W) or
    a one-hot array with the shape of ``probs``.
    """
    n_cls = probs.shape[1]
    t = np.asarray(targets)
    if t.shape == probs.shape and t.dtype.kind == "f":
        onehot = t.astype(probs.dtype)
    else:
        t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= n_cls):
            raise ValueError(f"target index out of range for {n_cls} classes")
        onehot = np.moveaxis(np.eye(n_cls, dtype=probs.dtype)[t], -1, 1)
        if onehot.shape != probs.shape:
            raise ValueError(f"targets {t.shape} do not match probabilities {probs.shape}")
    if class_weights is not None:
        wshape = (1, n_cls) + (1,) * (probs.ndim - 2)
        onehot = onehot * np.asarray(class_weights, dtype=probs.dtype).reshape(wshape)
    count = probs.data.size // n_cls
    logp = log_clamped(probs)
    weighted = mul(logp, Tensor(onehot * (-1.0 / count)))
    return sum(weighted)


def resize_nearest(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour spatial resize of an (N, C, H, W) array (not recorded)."""
    h, w = x.shape[2:]
    th, tw = size
    if (h, w) == (th, tw):
        return x
    ri = (np.arange(th) * h) // th
    ci = (np.arange(tw) * w) // tw
    return x[:, :, ri][:, :, :, ci]
