"""Network assembly: auxiliary feature net, STM-BRNet detector, SA-CB-BRSeg segmenter."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .blocks import (
    DecoderBlockParams,
    EncDecBlockParams,
    StmBlockParams,
    boosted_decoder_block,
    encoder_features,
    encoder_pool,
    init_conv,
    stm_block,
)
from .ops import conv2d, pool2d, relu
from .tensor import Tensor, no_grad


class UntrainedAuxError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    in_channels: int = 1
    input_size: int = 64
    stem_width: int = 16
    stm_widths: tuple[int, int] = (32, 64)
    seg_widths: tuple[int, int] = (16, 32)
    hidden: int = 64
    dropout: float = 0.5
    num_classes: int = 2
    head_kernel: int = 2
    aux_widths: tuple[int, int] | None = None  # default: matches STM path widths
    input_mean: float = 0.0
    input_std: float = 1.0
    channel_boost: bool = True
    attention: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.stm_widths = tuple(self.stm_widths)
        self.seg_widths = tuple(self.seg_widths)
        if len(self.stm_widths) != 2 or len(self.seg_widths) != 2:
            raise ValueError("two STM blocks and two encoder/decoder pairs are required")
        if min(self.stm_widths + self.seg_widths) < 1 or self.stem_width < 1 or self.hidden < 1:
            raise ValueError("widths must be positive")
        for w in self.stm_widths:
            if w % 4:
                raise ValueError("STM widths must be divisible by 4 (four equal paths)")
        if self.aux_widths is None:
            self.aux_widths = tuple(w // 4 for w in self.stm_widths)
        self.aux_widths = tuple(self.aux_widths)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        kw.setdefault("stm_widths", (256, 512))
        return cls(**kw)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    """Named parameter table plus a forward function."""

    kind = "model"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}

    def _register(self, prefix: str, tensors: dict[str, Tensor]) -> None:
        for k, t in tensors.items():
            self.params[f"{prefix}.{k}"] = t

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def named_tensors(self) -> dict[str, Tensor]:
        """All tensors that define the model state (including frozen auxiliaries)."""
        return dict(self.params)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for _, t in self.trainable()))

    def normalize(self, x: Tensor) -> Tensor:
        """Fixed affine input standardisation (statistics come from the training set)."""
        if self.cfg.input_mean == 0.0 and self.cfg.input_std == 1.0:
            return x
        return Tensor((x.data - self.cfg.input_mean) / self.cfg.input_std)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        raise NotImplementedError

    __call__ = forward


class AuxNet(Model):
    """Small two-block CNN; pretrained on detection, then frozen as a channel source."""

    kind = "aux"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg)
        dt = cfg.np_dtype
        a1, a2 = cfg.aux_widths
        self.conv1 = init_conv(rng, cfg.in_channels, a1, 3, dtype=dt)
        self.conv2 = init_conv(rng, a1, a2, 3, dtype=dt)
        std = np.sqrt(2.0 / a2)
        self.w_out = Tensor((rng.standard_normal((a2, cfg.num_classes)) * std).astype(dt), requires_grad=True)
        self.b_out = Tensor(np.zeros(cfg.num_classes, dtype=dt), requires_grad=True)
        self.params = {
            "conv1.weight": self.conv1.kernel,
            "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.kernel,
            "conv2.bias": self.conv2.bias,
            "out.weight": self.w_out,
            "out.bias": self.b_out,
        }
        self.trained = False

    def feature_maps(self, x: Tensor) -> list[Tensor]:
        l1, _ = pool2d(relu(conv2d(self.normalize(x), self.conv1)), 2, 2, "max")
        l2, _ = pool2d(relu(conv2d(l1, self.conv2)), 2, 2, "max")
        return [l1, l2]

    def embed(self, x: Tensor) -> Tensor:
        return ops.global_avg_pool(self.feature_maps(x)[1])

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return ops.softmax(ops.dense(self.embed(x), self.w_out, self.b_out))

    __call__ = forward

    def freeze(self) -> "AuxNet":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.trained = True
        return self


def make_aux_channels(aux_model: AuxNet | None, x: Tensor, level: int, size=None, enabled: bool = True) -> np.ndarray:
    """Intermediate aux feature map at ``level`` (1 or 2), nearest-resized to ``size``.

    Returned as a plain array: no gradient path leads back into the aux model.
    With ``enabled=False`` a zero-channel array is returned instead.
    """
    n, _, h, w = x.shape
    if size is None:
        size = (h >> level, w >> level)
    if not enabled:
        return np.zeros((n, 0) + tuple(size), dtype=x.dtype)
    if aux_model is None or not aux_model.trained:
        raise UntrainedAuxError("auxiliary network must be pretrained and frozen before use")
    if level not in (1, 2):
        raise ValueError("aux level must be 1 or 2")
    with no_grad():
        fmap = aux_model.feature_maps(Tensor(x.data.astype(aux_model.cfg.np_dtype, copy=False)))[level - 1]
    return ops.resize_nearest(fmap.data, tuple(size)).astype(x.dtype, copy=False)


class STMBRNet(Model):
    """Stem conv, two channel-boosted STM blocks, GAP, dense-relu-dropout-dense, softmax."""

    kind = "stm_brnet"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, aux: AuxNet | None = None):
        super().__init__(cfg)
        if cfg.input_size < 4 or cfg.input_size % 4:
            raise ValueError("input size must allow two halvings (multiple of 4)")
        dt = cfg.np_dtype
        w1, w2 = cfg.stm_widths
        if cfg.channel_boost and aux is not None and tuple(cfg.aux_widths) != (w1 // 4, w2 // 4):
            raise ValueError("aux widths must equal the STM path widths")
        self.aux = aux
        self.stem = init_conv(rng, cfg.in_channels, cfg.stem_width, 3, dtype=dt)
        self.stm1 = StmBlockParams.init(rng, cfg.stem_width, w1 // 4, w1, dtype=dt)
        self.stm2 = StmBlockParams.init(rng, w1, w2 // 4, w2, dtype=dt)
        self.fc1_w = Tensor((rng.standard_normal((w2, cfg.hidden)) * np.sqrt(2.0 / w2)).astype(dt), requires_grad=True)
        self.fc1_b = Tensor(np.zeros(cfg.hidden, dtype=dt), requires_grad=True)
        # zero-initialised classifier: uniform predictions (loss ln 2) at step 0
        self.fc2_w = Tensor(np.zeros((cfg.hidden, cfg.num_classes), dtype=dt), requires_grad=True)
        self.fc2_b = Tensor(np.zeros(cfg.num_classes, dtype=dt), requires_grad=True)
        self.params = {"stem.weight": self.stem.kernel, "stem.bias": self.stem.bias}
        self._register("stm1", self.stm1.tensors())
        self._register("stm2", self.stm2.tensors())
        self.params.update({"fc1.weight": self.fc1_w, "fc1.bias": self.fc1_b, "fc2.weight": self.fc2_w, "fc2.bias": self.fc2_b})

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.aux is not None:
            out.update({f"aux/{k}": t for k, t in self.aux.params.items()})
        return out

    def _aux(self, x: Tensor):
        if not self.cfg.channel_boost or self.aux is None:
            return None, None
        return (
            make_aux_channels(self.aux, x, 1),
            make_aux_channels(self.aux, x, 2),
        )

    def embed(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """Hidden-layer features (after dense + relu, before dropout)."""
        a1, a2 = self._aux(x)
        h = relu(conv2d(self.normalize(x), self.stem))
        h = relu(stm_block(h, self.stm1, a1))
        h = relu(stm_block(h, self.stm2, a2))
        g = ops.global_avg_pool(h)
        return relu(ops.dense(g, self.fc1_w, self.fc1_b))

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        h = ops.dropout(self.embed(x), self.cfg.dropout, rng, training)
        return ops.softmax(ops.dense(h, self.fc2_w, self.fc2_b))

    __call__ = forward


class SACBBRSeg(Model):
    """Two encoder blocks, bottleneck, two boosted decoder blocks, 2x2 head, per-pixel softmax."""

    kind = "sa_cb_brseg"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, aux: AuxNet | None = None):
        super().__init__(cfg)
        if cfg.input_size % 4:
            raise ValueError("segmenter input dims must be divisible by 4")
        if cfg.channel_boost and aux is None:
            raise ValueError("channel boosting needs an auxiliary network")
        dt = cfg.np_dtype
        e1, e2 = cfg.seg_widths
        a1, a2 = cfg.aux_widths if cfg.channel_boost else (0, 0)
        self.aux = aux
        self.enc1 = EncDecBlockParams.init(rng, cfg.in_channels, e1, dtype=dt)
        self.enc2 = EncDecBlockParams.init(rng, e1, e2, dtype=dt)
        self.bott1 = init_conv(rng, e2, e2, 3, dtype=dt)
        self.bott2 = init_conv(rng, e2, e2, 3, dtype=dt)
        # deeper decoder pairs with the deeper aux level
        self.dec2 = DecoderBlockParams.init(rng, e2, e2, a2, e1, attention=cfg.attention, dtype=dt)
        self.dec1 = DecoderBlockParams.init(rng, e1, e1, a1, e1, attention=cfg.attention, dtype=dt)
        k = cfg.head_kernel
        self.head = init_conv(rng, e1, cfg.num_classes, k, padding=ops.same_padding(k), dtype=dt)
        self.params = {}
        for name, blk in (("enc1", self.enc1), ("enc2", self.enc2)):
            self._register(name, blk.tensors())
        for name, spec in (("bott1", self.bott1), ("bott2", self.bott2), ("head", self.head)):
            self.params[f"{name}.weight"] = spec.kernel
            self.params[f"{name}.bias"] = spec.bias
        self._register("dec2", self.dec2.tensors())
        self._register("dec1", self.dec1.tensors())

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        if self.aux is not None:
            out.update({f"aux/{k}": t for k, t in self.aux.params.items()})
        return out

    def forward(self, x: Tensor, training: bool = False, rng=None, trace: dict | None = None) -> Tensor:
        n, _, h, w = x.shape
        if h % 4 or w % 4:
            raise ValueError(f"segmenter input dims must be divisible by 4, got {(h, w)}")
        enabled = self.cfg.channel_boost
        aux1 = make_aux_channels(self.aux, x, 1, (h, w), enabled)
        aux2 = make_aux_channels(self.aux, x, 2, (h // 2, w // 2), enabled)

        s1 = encoder_features(self.normalize(x), self.enc1)
        p1, i1 = encoder_pool(s1, self.enc1)
        s2 = encoder_features(p1, self.enc2)
        p2, i2 = encoder_pool(s2, self.enc2)
        b = relu(conv2d(relu(conv2d(p2, self.bott1)), self.bott2))
        d2 = relu(boosted_decoder_block(b, i2, s2, aux2, self.dec2))
        d1 = relu(boosted_decoder_block(d2, i1, s1, aux1, self.dec1))
        if trace is not None:
            trace.update(enc1=s1, enc2=s2, dec2=d2, dec1=d1)
        return ops.softmax(conv2d(d1, self.head), axis=1)

    __call__ = forward


def build_aux(cfg: ModelConfig, rng: np.random.Generator) -> AuxNet:
    return AuxNet(cfg, rng)


def build_stm_brnet(cfg: ModelConfig, rng: np.random.Generator, aux: AuxNet | None = None) -> STMBRNet:
    return STMBRNet(cfg, rng, aux)


def build_sa_cb_brseg(cfg: ModelConfig, rng: np.random.Generator, aux: AuxNet | None = None) -> SACBBRSeg:
    return SACBBRSeg(cfg, rng, aux)
