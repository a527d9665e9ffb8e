"""End-to-end steps shared by the command line, demos and acceptance checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import metrics
from .data.phantoms import SampleSet
from .models import AuxNet, ModelConfig, SACBBRSeg, STMBRNet, build_sa_cb_brseg, build_stm_brnet
from .runtime import RngStreams
from .tensor import Tensor, no_grad
from .train import Hyperparams, predict, pretrain_aux, train

log = logging.getLogger(__name__)

AUX_HYPER = Hyperparams(lr=0.05, epochs=60)


def with_input_stats(cfg: ModelConfig, samples: SampleSet) -> ModelConfig:
    """Copy of ``cfg`` standardising inputs by the pixel mean/std of ``samples``."""
    imgs = samples.images(np.float64)
    std = float(imgs.std())
    return replace(cfg, input_mean=float(imgs.mean()), input_std=std if std > 0 else 1.0)


def fit_aux(cfg: ModelConfig, labelled: SampleSet, seed: int, hyper: Hyperparams = AUX_HYPER) -> AuxNet:
    labels = set(labelled.labels().tolist())
    if labels != {0, 1}:
        raise ValueError("auxiliary pretraining needs both healthy and infected samples")
    log.info("pretraining auxiliary network: %d samples, %d epochs", len(labelled), hyper.epochs)
    return pretrain_aux(cfg, labelled, hyper, seed, hyper.epochs)


def fit_detector(
    train_set: SampleSet,
    val_set: SampleSet | None,
    cfg: ModelConfig,
    hyper: Hyperparams,
    seed: int,
    aux: AuxNet | None = None,
    aux_hyper: Hyperparams = AUX_HYPER,
) -> STMBRNet:
    """Standardise by training statistics, pretrain the aux net if needed, train the detector."""
    cfg = with_input_stats(cfg, train_set)
    if cfg.channel_boost and aux is None:
        aux = fit_aux(cfg, train_set, seed, aux_hyper)
    streams = RngStreams(seed)
    model = build_stm_brnet(cfg, streams["init"], aux if cfg.channel_boost else None)
    train(model, (train_set, val_set), hyper, streams, "detect")
    return model


def fit_segmenter(
    train_set: SampleSet,
    val_set: SampleSet | None,
    cfg: ModelConfig,
    hyper: Hyperparams,
    seed: int,
    aux: AuxNet | None = None,
    aux_source: SampleSet | None = None,
    aux_hyper: Hyperparams = AUX_HYPER,
    on_epoch=None,
) -> SACBBRSeg:
    """Train the segmenter on ``train_set``.

    With channel boosting on and no ``aux`` given, an aux net is pretrained on
    ``aux_source`` (a labelled healthy/infected set; defaults to ``train_set``).
    """
    cfg = with_input_stats(cfg, train_set)
    if cfg.channel_boost and aux is None:
        aux = fit_aux(cfg, aux_source if aux_source is not None else train_set, seed, aux_hyper)
    streams = RngStreams(seed)
    model = build_sa_cb_brseg(cfg, streams["init"], aux if cfg.channel_boost else None)
    train(model, (train_set, val_set), hyper, streams, "segment", on_epoch=on_epoch)
    return model


# --------------------------------------------------------------------------
# inference


def detect(model: STMBRNet, samples: SampleSet) -> np.ndarray:
    """Infected-class probability per sample."""
    if not len(samples):
        return np.zeros(0)
    return predict(model, samples.images(model.cfg.np_dtype))[:, 1]


def segment(model: SACBBRSeg, samples: SampleSet) -> np.ndarray:
    """Binary masks (N, H, W); pixel is infected when its class-1 probability wins."""
    if not len(samples):
        return np.zeros((0, 0, 0), dtype=np.uint8)
    probs = predict(model, samples.images(model.cfg.np_dtype))
    return probs.argmax(axis=1).astype(np.uint8)


def embed(model: STMBRNet, samples: SampleSet, batch_size: int = 32) -> np.ndarray:
    imgs = samples.images(model.cfg.np_dtype)
    out = []
    with no_grad():
        for i in range(0, len(imgs), batch_size):
            out.append(model.embed(Tensor(imgs[i : i + batch_size])).data)
    return np.concatenate(out)


@dataclass
class PipelineResult:
    ids: list[str]
    p_infected: np.ndarray
    detected: np.ndarray  # bool per sample
    masks: dict[str, np.ndarray]  # only for detect-positive samples


def run_pipeline(detector: STMBRNet, segmenter: SACBBRSeg, samples: SampleSet, threshold: float = 0.5) -> PipelineResult:
    """Screen every slice, then segment only the slices flagged infected."""
    p = detect(detector, samples)
    flagged = p >= threshold
    positives = SampleSet(s for s, f in zip(samples, flagged) if f)
    masks = segment(segmenter, positives)
    return PipelineResult(
        ids=[s.id for s in samples],
        p_infected=p,
        detected=flagged,
        masks={s.id: m for s, m in zip(positives, masks)},
    )


# --------------------------------------------------------------------------
# ablation


ABLATIONS = {
    "full": {"channel_boost": True, "attention": True},
    "no-CB": {"channel_boost": False, "attention": True},
    "no-SA": {"channel_boost": True, "attention": False},
}


def ablation(
    train_set: SampleSet,
    test_set: SampleSet,
    cfg: ModelConfig,
    hyper: Hyperparams,
    seed: int,
    aux_source: SampleSet,
    variants=tuple(ABLATIONS),
) -> list[dict]:
    """Train one segmenter per variant on identical data and seed; infected-class test metrics per row."""
    aux = None
    if any(ABLATIONS[v]["channel_boost"] for v in variants):
        aux = fit_aux(with_input_stats(cfg, train_set), aux_source, seed)
    rows = []
    for name in variants:
        vcfg = replace(cfg, **ABLATIONS[name])
        model = fit_segmenter(train_set, None, vcfg, hyper, seed, aux=aux if vcfg.channel_boost else None)
        rep = metrics.segmentation_metrics(segment(model, test_set), test_set.masks())
        inf = rep.for_class(1)
        rows.append({
            "variant": name,
            "dice": inf["dice"],
            "iou": inf["iou"],
            "s_acc": inf["class_accuracy"],
            "bfs": inf["boundary_f"],
            "global_acc": rep.global_acc,
            "mean_iou": rep.mean_iou,
            "params": model.num_parameters(),
        })
    return rows


def format_ablation(rows: list[dict]) -> str:
    """Comparison table as CSV text, metric values in percent."""
    cols = ["variant", "dice", "iou", "s_acc", "bfs", "global_acc", "mean_iou", "params"]
    lines = [",".join(cols)]
    for r in rows:
        vals = [r["variant"]]
        vals += [metrics.fmt(None if r[c] is None else 100 * r[c]) for c in cols[1:-1]]
        vals.append(str(r["params"]))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
