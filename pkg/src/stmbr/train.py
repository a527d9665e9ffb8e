"""Losses, optimiser, dataset splitting, training loop and checkpointing."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import checkpoint as ckpt
from .data.phantoms import SampleSet
from .models import AuxNet, Model, ModelConfig, SACBBRSeg, STMBRNet, build_aux
from .ops import cross_entropy
from .runtime import RngStreams, stream
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    momentum: float = 0.95
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        if self.optimizer != "sgd":
            raise ValueError("only SGD with momentum is supported")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
                      lr: float, momentum: float) -> None:
    """Heavy-ball update in place: v <- m*v + g ; p <- p - lr*v."""
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        p -= lr * v


# --------------------------------------------------------------------------
# splitting


def _allocate(counts: dict[int, int], total: int) -> dict[int, int]:
    """Largest-remainder allocation of ``total`` across classes proportional to ``counts``."""
    n = sum(counts.values())
    quotas = {c: Fraction(k * total, n) for c, k in counts.items()}
    alloc = {c: int(q) for c, q in quotas.items()}
    left = total - sum(alloc.values())
    order = sorted(counts, key=lambda c: (-(quotas[c] - alloc[c]), c))
    for c in order[:left]:
        alloc[c] += 1
    return alloc


def _holdout_count(n: int, ratio: float) -> int:
    # the kept part is floor((1 - ratio) * n); the held-out part takes the remainder
    keep = int((1 - Fraction(str(ratio))) * n)
    return n - keep


def split_dataset(samples, test_ratio: float = 0.2, val_ratio: float = 0.1, seed: int = 0):
    """Stratified, seeded hold-out split into (train, val, test)."""
    for r in (test_ratio, val_ratio):
        if not 0 <= r < 1:
            raise ValueError("split ratios must lie in [0, 1)")
    if test_ratio + val_ratio >= 1:
        raise ValueError("test and validation ratios leave no training data")
    samples = list(samples)
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in samples])
    classes = sorted(set(labels.tolist()))
    by_class = {c: [i for i in rng.permutation(len(samples)) if labels[i] == c] for c in classes}
    counts = {c: len(v) for c, v in by_class.items()}
    needed = 1 + (test_ratio > 0) + (val_ratio > 0)

    n_test = _allocate(counts, _holdout_count(len(samples), test_ratio))
    pool_counts = {c: counts[c] - n_test[c] for c in classes}
    n_val = _allocate(pool_counts, _holdout_count(sum(pool_counts.values()), val_ratio))
    test, val, train = [], [], []
    for c in classes:
        idx = by_class[c]
        if counts[c] < needed or counts[c] - n_test[c] - n_val[c] < 1:
            raise ValueError(f"class {c} has {counts[c]} samples, too few for the requested split")
        test += idx[: n_test[c]]
        val += idx[n_test[c] : n_test[c] + n_val[c]]
        train += idx[n_test[c] + n_val[c] :]
    rank = rng.permutation(len(samples))

    def pick(ids):
        return SampleSet(samples[i] for i in sorted(ids, key=lambda i: rank[i]))

    return pick(train), pick(val), pick(test)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    val_acc: list[float | None] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    rng_cursors: dict[str, list[float]] = field(default_factory=dict)
    wall_clock: list[float] = field(default_factory=list, compare=False)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,train_acc,val_loss,val_acc,wall_clock\n")
            for row in zip(self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc, self.wall_clock):
                fh.write(",".join("" if v is None else repr(v) for v in row) + "\n")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class TrainState:
    """Everything besides the weights needed to continue a run bit-exactly."""

    velocity: dict[str, np.ndarray]
    rngs: RngStreams
    epoch: int = 0
    history: TrainHistory = field(default_factory=TrainHistory)

    @classmethod
    def fresh(cls, model: Model, seed: int) -> "TrainState":
        return cls({k: np.zeros_like(t.data) for k, t in model.trainable()}, RngStreams(seed))


def _targets(samples: SampleSet, mode: str) -> np.ndarray:
    if mode == "detect":
        return samples.labels()
    if mode == "segment":
        return samples.masks()
    raise ValueError(f"unknown mode {mode!r}")


def _accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float((probs.argmax(axis=1) == targets).mean())


def predict(model: Model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Evaluation-mode class probabilities (dropout off, nothing recorded)."""
    out = []
    dt = model.cfg.np_dtype
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(np.asarray(images[i : i + batch_size], dtype=dt)), training=False).data)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate(model: Model, samples: SampleSet, mode: str, class_weights=None, batch_size: int = 32):
    """Mean loss, accuracy (pixel accuracy for segmentation) and probabilities."""
    probs = predict(model, samples.images(model.cfg.np_dtype), batch_size)
    targets = _targets(samples, mode)
    loss = float(cross_entropy(Tensor(probs), targets, class_weights).data)
    return loss, _accuracy(probs, targets), probs


def inverse_frequency_weights(masks: np.ndarray, num_classes: int = 2) -> np.ndarray:
    counts = np.bincount(np.asarray(masks).ravel(), minlength=num_classes).astype(np.float64)
    w = counts.sum() / (num_classes * np.maximum(counts, 1))
    return w


def train(
    model: Model,
    sets,
    hyper: Hyperparams,
    rng: int | RngStreams | TrainState,
    mode: str = "detect",
    epochs: int | None = None,
    class_weights=None,
    on_epoch=None,
) -> tuple[Model, TrainHistory]:
    """Mini-batch SGD-momentum training on cross-entropy.

    ``sets`` is ``(train, val)``; ``val`` may be empty.  ``rng`` is a master
    seed, a stream bundle, or a :class:`TrainState` to continue from (the
    state is updated in place).  ``epochs`` is the total epoch count to reach
    (defaults to ``hyper.epochs``).  ``on_epoch(state)`` runs after each epoch.
    """
    train_set, val_set = sets
    train_set = SampleSet(train_set)
    if not train_set:
        raise ValueError("training set is empty")
    if isinstance(rng, TrainState):
        state = rng
    else:
        state = TrainState.fresh(model, rng.seed if isinstance(rng, RngStreams) else rng)
        if isinstance(rng, RngStreams):
            state.rngs = rng
    total = hyper.epochs if epochs is None else epochs
    hist = state.history
    shuffle, drop = state.rngs["shuffle"], state.rngs["dropout"]
    images = train_set.images(model.cfg.np_dtype)
    targets = _targets(train_set, mode)
    names = [k for k, _ in model.trainable()]
    tensors = [t for _, t in model.trainable()]
    velocity = [state.velocity[k] for k in names]

    while state.epoch < total:
        t0 = time.perf_counter()
        epoch = state.epoch + 1
        perm = shuffle.permutation(len(train_set))
        losses, correct, seen = [], 0.0, 0
        for step, start in enumerate(range(0, len(perm), hyper.batch_size)):
            idx = perm[start : start + hyper.batch_size]
            model.zero_grad()
            try:
                probs = model(Tensor(images[idx]), training=True, rng=drop)
                loss = cross_entropy(probs, targets[idx], class_weights)
                grads = backward(loss, tensors)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, step {step}: {exc}") from exc
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            sgd_momentum_step([t.data for t in tensors], grads, velocity, hyper.lr, hyper.momentum)
            losses.append(lval)
            pred = probs.data.argmax(axis=1)
            correct += float((pred == targets[idx]).mean()) * len(idx)
            seen += len(idx)
        model.zero_grad()
        hist.epoch.append(epoch)
        hist.step_loss.extend(losses)
        hist.train_loss.append(float(np.mean(losses)))
        hist.train_acc.append(correct / seen)
        if val_set is not None and len(val_set):
            vl, va, _ = evaluate(model, SampleSet(val_set), mode, class_weights)
            hist.val_loss.append(vl)
            hist.val_acc.append(va)
        else:
            hist.val_loss.append(None)
            hist.val_acc.append(None)
        hist.wall_clock.append(time.perf_counter() - t0)
        state.epoch = epoch
        hist.rng_cursors = {k: ckpt.rng_to_array(g).tolist() for k, g in state.rngs.items()}
        log.info(
            "epoch %d/%d loss=%.4f acc=%.4f val_loss=%s val_acc=%s (%.1fs)",
            epoch, total, hist.train_loss[-1], hist.train_acc[-1], hist.val_loss[-1], hist.val_acc[-1],
            hist.wall_clock[-1],
        )
        if on_epoch is not None:
            on_epoch(state)
    model.train_state = state
    return model, hist


def pretrain_aux(cfg: ModelConfig, train_set, hyper: Hyperparams, seed: int, epochs: int | None = None) -> AuxNet:
    """Train the auxiliary net on the detection labels, then freeze it."""
    aux = build_aux(cfg, stream(seed, "aux_init"))
    # aux shuffling gets its own bundle so it never shifts the main run's streams
    sub_seed = int(stream(seed, "aux_train").integers(2**62))
    train(aux, (train_set, None), hyper, RngStreams(sub_seed), "detect", epochs=epochs)
    return aux.freeze()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, state: TrainState | None, path, extra: dict | None = None) -> None:
    tensors = {k: t.data for k, t in model.named_tensors().items()}
    meta = {"kind": model.kind, "config": model.cfg.to_dict(), "extra": extra or {}}
    if isinstance(model, (STMBRNet, SACBBRSeg)) and model.aux is not None:
        meta["aux_trained"] = model.aux.trained
    if isinstance(model, AuxNet):
        meta["aux_trained"] = model.trained
    if state is not None:
        meta["epoch"] = state.epoch
        meta["seed"] = state.rngs.seed
        meta["history"] = state.history.to_dict()
        for k, v in state.velocity.items():
            tensors[f"opt/{k}"] = v
        for k, g in state.rngs.items():
            tensors[f"rng/{k}"] = ckpt.rng_to_array(g)
    tensors["cfg/meta"] = ckpt.config_to_array(meta)
    ckpt.save_tensors(tensors, path)


def _model_from_meta(meta: dict) -> Model:
    cfg = ModelConfig(**meta["config"])
    dummy = np.random.default_rng(0)
    kind = meta["kind"]
    if kind == "aux":
        return AuxNet(cfg, dummy)
    aux = AuxNet(cfg, dummy) if "aux_trained" in meta else None
    if kind == "stm_brnet":
        return STMBRNet(cfg, dummy, aux)
    if kind == "sa_cb_brseg":
        return SACBBRSeg(cfg, dummy, aux)
    raise ckpt.CheckpointError(f"unknown model kind {kind!r}")


def load_checkpoint(path) -> tuple[Model, TrainState | None]:
    tensors = ckpt.load_tensors(path)
    if "cfg/meta" not in tensors:
        raise ckpt.CheckpointError("checkpoint has no config record")
    meta = ckpt.config_from_array(tensors["cfg/meta"])
    model = _model_from_meta(meta)
    for name, t in model.named_tensors().items():
        if name not in tensors:
            raise ckpt.CheckpointError(f"checkpoint lacks tensor {name!r}")
        if tensors[name].shape != t.shape:
            raise ckpt.CheckpointError(f"{name}: shape {tensors[name].shape} != {t.shape}")
        t.data = tensors[name]
    aux = model if isinstance(model, AuxNet) else getattr(model, "aux", None)
    if aux is not None and meta.get("aux_trained"):
        aux.freeze()
    state = None
    if "epoch" in meta:
        rngs = RngStreams(meta["seed"])
        for k, v in tensors.items():
            if k.startswith("rng/"):
                rngs[k[4:]] = ckpt.rng_from_array(v)
        velocity = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
        hist = TrainHistory(**meta["history"])
        hist.wall_clock = [float("nan")] * len(hist.epoch)
        state = TrainState(velocity, rngs, meta["epoch"], hist)
    model.meta = meta
    return model, state
