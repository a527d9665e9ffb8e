"""Composite blocks of the detector and segmenter.

* STM block: four parallel paths (ER, RE, R, E) concatenated along channels,
  then a 1x1 transition conv.  The E path carries frozen auxiliary features.
* Attention gate: per-pixel weight in (0, 1) computed from skip features and
  a gating signal, multiplied back over the skip features.
* Encoder block: two 3x3 convs, then avg- and max-pooled copies fused by 1x1.
* Boosted decoder block: index unpooling, max/avg smoothing fused by 1x1,
  gated skip and auxiliary channels concatenated, then a 3x3 conv.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .ops import ConvSpec, PoolIndices, concat_channels, conv2d, pool2d, relu
from .tensor import Tensor


def init_conv(
    rng: np.random.Generator,
    in_ch: int,
    out_ch: int,
    k: int = 3,
    dilation: int = 1,
    stride: int = 1,
    padding=None,
    dtype=np.float32,
) -> ConvSpec:
    """He-initialised conv with zero bias; 'same' padding unless given."""
    std = np.sqrt(2.0 / (in_ch * k * k))
    kern = Tensor((rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype), requires_grad=True)
    bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
    if padding is None:
        padding = ops.same_padding(k, dilation)
    return ConvSpec(kern, bias, stride=stride, dilation=dilation, padding=padding)


def _conv_tensors(p) -> dict[str, Tensor]:
    out = {}
    for f in fields(p):
        v = getattr(p, f.name)
        if isinstance(v, ConvSpec):
            out[f"{f.name}.weight"] = v.kernel
            out[f"{f.name}.bias"] = v.bias
        elif isinstance(v, Tensor):
            out[f.name] = v
        elif v is not None and hasattr(v, "tensors"):
            for k, t in v.tensors().items():
                out[f"{f.name}.{k}"] = t
    return out


# --------------------------------------------------------------------------
# STM block


@dataclass
class StmBlockParams:
    re1: ConvSpec
    re2: ConvSpec
    er1: ConvSpec
    er2: ConvSpec
    r1: ConvSpec
    transition: ConvSpec

    @property
    def path_width(self) -> int:
        return self.r1.out_channels

    def tensors(self) -> dict[str, Tensor]:
        return _conv_tensors(self)

    @classmethod
    def init(cls, rng, in_ch: int, path_width: int, out_ch: int, dtype=np.float32) -> "StmBlockParams":
        c = path_width
        return cls(
            re1=init_conv(rng, in_ch, c, 3, dilation=1, dtype=dtype),
            re2=init_conv(rng, c, c, 3, dilation=2, dtype=dtype),
            er1=init_conv(rng, in_ch, c, 3, dilation=1, dtype=dtype),
            er2=init_conv(rng, c, c, 3, dilation=2, dtype=dtype),
            r1=init_conv(rng, in_ch, c, 3, dilation=1, dtype=dtype),
            transition=init_conv(rng, 4 * c, out_ch, 1, dtype=dtype),
        )


# window 2, stride 1, pad bottom/right: smoothing without changing resolution
SMOOTH_PAD = (0, 1, 0, 1)


def stm_paths(x: Tensor, p: StmBlockParams, aux_features) -> list[Tensor]:
    """Outputs of the ER, RE, R and E paths, each at half resolution."""
    n, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"STM block needs even spatial dims, got {(h, w)}")
    cp = p.path_width

    re = relu(conv2d(relu(conv2d(x, p.re1)), p.re2))
    re, _ = pool2d(re, 2, 1, "avg", SMOOTH_PAD)
    re, _ = pool2d(re, 2, 2, "max")

    er = relu(conv2d(relu(conv2d(x, p.er1)), p.er2))
    er, _ = pool2d(er, 2, 2, "max")

    r, _ = pool2d(relu(conv2d(x, p.r1)), 2, 2, "avg")

    if aux_features is None:
        e = Tensor(np.zeros((n, cp, h // 2, w // 2), dtype=x.dtype))
    else:
        aux = aux_features.data if isinstance(aux_features, Tensor) else np.asarray(aux_features)
        if aux.shape[:2] != (n, cp):
            raise ValueError(f"aux features {aux.shape} must have batch {n} and {cp} channels")
        aux = ops.resize_nearest(aux.astype(x.dtype, copy=False), (h, w))
        # frozen channels: a plain array, so nothing upstream receives gradient
        e, _ = pool2d(Tensor(aux), 2, 2, "max")

    paths = [er, re, r, e]
    for q in paths:
        if q.shape[2:] != (h // 2, w // 2):
            raise ValueError(f"STM path resolution mismatch: {q.shape}")
    return paths


def stm_boost(x: Tensor, p: StmBlockParams, aux_features=None) -> Tensor:
    """Channel-boosted tensor: ER || RE || R || E, 4 * path_width channels."""
    return concat_channels(stm_paths(x, p, aux_features))


def stm_block(x: Tensor, p: StmBlockParams, aux_features=None) -> Tensor:
    return conv2d(stm_boost(x, p, aux_features), p.transition)


# --------------------------------------------------------------------------
# attention gate


@dataclass
class SaGateParams:
    w_x: Tensor  # (inter, skip_ch, 1, 1)
    w_sa: Tensor  # (inter, gate_ch, 1, 1)
    b_sa: Tensor  # (inter,)
    f: Tensor  # (1, inter, 1, 1)
    b_f: Tensor  # (1,)

    def tensors(self) -> dict[str, Tensor]:
        return _conv_tensors(self)

    @classmethod
    def init(cls, rng, skip_ch: int, gate_ch: int, inter: int | None = None, dtype=np.float32) -> "SaGateParams":
        inter = inter or max(4, skip_ch // 2)

        def w(o, i):
            return Tensor((rng.standard_normal((o, i, 1, 1)) * np.sqrt(2.0 / i)).astype(dtype), requires_grad=True)

        def z(k):
            return Tensor(np.zeros(k, dtype=dtype), requires_grad=True)

        return cls(w(inter, skip_ch), w(inter, gate_ch), z(inter), w(1, inter), z(1))


def sa_weights(x_l: Tensor, gate: Tensor, p: SaGateParams) -> Tensor:
    """Per-pixel weight map (N, 1, H, W), values in (0, 1)."""
    if x_l.shape[2:] != gate.shape[2:]:
        raise ValueError(f"attention gate: skip {x_l.shape} and gate {gate.shape} differ spatially")
    zero = Tensor(np.zeros(p.w_sa.shape[0], dtype=p.w_sa.dtype))
    a = conv2d(x_l, ConvSpec(p.w_x, p.b_sa))
    b = conv2d(gate, ConvSpec(p.w_sa, zero))
    x_relu = relu(ops.add(a, b))
    return ops.sigmoid(conv2d(x_relu, ConvSpec(p.f, p.b_f)))


def sa_gate(x_l: Tensor, gate: Tensor, p: SaGateParams) -> Tensor:
    return ops.mul(sa_weights(x_l, gate, p), x_l)


# --------------------------------------------------------------------------
# encoder / decoder


@dataclass
class EncDecBlockParams:
    conv1: ConvSpec
    conv2: ConvSpec
    fuse: ConvSpec

    def tensors(self) -> dict[str, Tensor]:
        return _conv_tensors(self)

    @classmethod
    def init(cls, rng, in_ch: int, out_ch: int, dtype=np.float32) -> "EncDecBlockParams":
        return cls(
            conv1=init_conv(rng, in_ch, out_ch, 3, dtype=dtype),
            conv2=init_conv(rng, out_ch, out_ch, 3, dtype=dtype),
            fuse=init_conv(rng, 2 * out_ch, out_ch, 1, dtype=dtype),
        )


def encoder_features(x: Tensor, p: EncDecBlockParams) -> Tensor:
    """Pre-pool activation (the skip connection for the mirrored decoder)."""
    return relu(conv2d(relu(conv2d(x, p.conv1)), p.conv2))


def encoder_pool(h: Tensor, p: EncDecBlockParams) -> tuple[Tensor, PoolIndices]:
    if h.shape[2] % 2 or h.shape[3] % 2:
        raise ValueError(f"encoder block needs even spatial dims, got {h.shape[2:]}")
    avg, _ = pool2d(h, 2, 2, "avg")
    mx, idx = pool2d(h, 2, 2, "max")
    return conv2d(concat_channels([avg, mx]), p.fuse), idx


def encoder_block(x: Tensor, p: EncDecBlockParams) -> tuple[Tensor, PoolIndices]:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"encoder block needs even spatial dims, got {x.shape[2:]}")
    return encoder_pool(encoder_features(x, p), p)


@dataclass
class DecoderBlockParams:
    fuse: ConvSpec  # 1x1, 2 * unpooled channels -> c_d
    out: ConvSpec  # 3x3, c_d + c_s + c_a -> out channels
    gate: SaGateParams | None = None  # None: skip is concatenated ungated

    def tensors(self) -> dict[str, Tensor]:
        return _conv_tensors(self)

    @classmethod
    def init(
        cls, rng, in_ch: int, skip_ch: int, aux_ch: int, out_ch: int, attention: bool = True, dtype=np.float32
    ) -> "DecoderBlockParams":
        c_d = in_ch
        return cls(
            fuse=init_conv(rng, 2 * in_ch, c_d, 1, dtype=dtype),
            out=init_conv(rng, c_d + skip_ch + aux_ch, out_ch, 3, dtype=dtype),
            gate=SaGateParams.init(rng, skip_ch, in_ch, dtype=dtype) if attention else None,
        )


def decoder_boost(x: Tensor, indices: PoolIndices, skip: Tensor, aux, p: DecoderBlockParams) -> Tensor:
    """Pre-conv tensor: fused max/avg smoothing || gated skip || aux channels."""
    if x.shape != indices.shape:
        raise ValueError(f"decoder input {x.shape} does not match pool indices {indices.shape}")
    n, c, h, w = indices.input_shape
    if skip.shape[2:] != (h, w) or skip.shape[0] != n:
        raise ValueError(f"skip {skip.shape} does not match unpooled size {(h, w)}")
    u = ops.max_unpool2d(x, indices)
    mx, _ = pool2d(u, 2, 1, "max", SMOOTH_PAD)
    av, _ = pool2d(u, 2, 1, "avg", SMOOTH_PAD)
    smoothed = conv2d(concat_channels([mx, av]), p.fuse)
    gated = sa_gate(skip, u, p.gate) if p.gate is not None else skip
    parts = [smoothed, gated]
    if aux is not None:
        aux = aux.data if isinstance(aux, Tensor) else np.asarray(aux)
        if aux.shape[1]:
            aux = ops.resize_nearest(aux.astype(x.dtype, copy=False), (h, w))
            parts.append(Tensor(aux))
    return concat_channels(parts)


def boosted_decoder_block(x: Tensor, indices: PoolIndices, skip: Tensor, aux, p: DecoderBlockParams) -> Tensor:
    return conv2d(decoder_boost(x, indices, skip, aux, p), p.out)
