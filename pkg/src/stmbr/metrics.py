"""Detection and segmentation metrics, ROC/PR curves, PCA projection, report output."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

UNDEFINED = None  # marker for metrics whose denominator is zero


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(predicted, true, positive_class=1) -> ConfusionCounts:
    p = np.asarray(predicted).ravel()
    t = np.asarray(true).ravel()
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and labels {t.shape} differ in length")
    if p.size == 0:
        raise ValueError("empty input")
    pp, tp_ = p == positive_class, t == positive_class
    return ConfusionCounts(
        tp=int(np.sum(pp & tp_)),
        fp=int(np.sum(pp & ~tp_)),
        tn=int(np.sum(~pp & ~tp_)),
        fn=int(np.sum(~pp & tp_)),
    )


def _ratio(num, den):
    return UNDEFINED if den == 0 else num / den


@dataclass
class DetectionReport:
    accuracy: float | None
    precision: float | None
    recall: float | None
    specificity: float | None
    f_score: float | None
    mcc: float | None
    roc_auc: float | None = None
    pr_auc: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def f_score(precision, recall):
    if precision is None or recall is None or precision + recall == 0:
        return UNDEFINED
    return 2 * precision * recall / (precision + recall)


def detection_metrics(c: ConfusionCounts) -> DetectionReport:
    """Accuracy, precision, recall, specificity, F (percent) and MCC in [-1, 1]."""
    pct = lambda v: None if v is None else 100.0 * v  # noqa: E731
    prec = _ratio(c.tp, c.tp + c.fp)
    rec = _ratio(c.tp, c.tp + c.fn)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = UNDEFINED if den == 0 else (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)
    return DetectionReport(
        accuracy=pct(_ratio(c.tp + c.tn, c.total)),
        precision=pct(prec),
        recall=pct(rec),
        specificity=pct(_ratio(c.tn, c.tn + c.fp)),
        f_score=pct(f_score(prec, rec)),
        mcc=mcc,
    )


# --------------------------------------------------------------------------
# curves


def curve_auc(scores, labels, kind: str = "roc", positive_class=1):
    """Threshold sweep over unique scores (descending), trapezoidal AUC.

    ROC points are (FPR, TPR) starting at (0, 0).  PR points are
    (recall, precision) starting at (0, 1).  Tied scores form one threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() == positive_class
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("curve needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # end of each tie group
    tp = np.cumsum(y)[last].astype(np.float64)
    fp = (last + 1) - tp
    if kind == "roc":
        x = np.r_[0.0, fp / n_neg]
        yv = np.r_[0.0, tp / n_pos]
    elif kind == "pr":
        x = np.r_[0.0, tp / n_pos]
        yv = np.r_[1.0, tp / (tp + fp)]
    else:
        raise ValueError(f"unknown curve kind {kind!r}")
    auc = float(np.sum(np.diff(x) * (yv[1:] + yv[:-1]) / 2))
    return np.column_stack([x, yv]), auc


# --------------------------------------------------------------------------
# segmentation


def _boundary(mask: np.ndarray) -> np.ndarray:
    # image edges are not boundaries: pad with the mask's own class
    return mask & ~ndimage.binary_erosion(mask, border_value=1)


def boundary_f(pred: np.ndarray, gt: np.ndarray, theta: float = 2.0) -> float:
    """Boundary F-score: boundary pixels matched within Euclidean distance ``theta``."""
    bp, bg = _boundary(pred.astype(bool)), _boundary(gt.astype(bool))
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = float((dist_to_gt[bp] <= theta).mean())
    recall = float((dist_to_pred[bg] <= theta).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class SegReport:
    classes: list[int]
    dice: list[float | None]
    iou: list[float | None]
    class_accuracy: list[float | None]
    boundary_f: list[float | None]
    global_acc: float
    mean_acc: float | None
    mean_iou: float | None
    weighted_iou: float | None
    mean_bfs: float | None

    def for_class(self, c: int) -> dict:
        k = self.classes.index(c)
        return {"dice": self.dice[k], "iou": self.iou[k], "class_accuracy": self.class_accuracy[k],
                "boundary_f": self.boundary_f[k]}


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else None


def segmentation_metrics(pred_mask, gt_mask, theta: float = 2.0, classes=(0, 1)) -> SegReport:
    """Per-class Dice/IoU/accuracy/BF plus Gl-Acc, Mn-Acc, Mn-IoU, Wt-IoU, Mn-BFs.

    Accepts one (H, W) mask pair or a stack (N, H, W); pixel tallies are
    pooled over the stack and BF is averaged over images.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not (np.isin(pred, (0, 1)).all() and np.isin(gt, (0, 1)).all()):
        raise ValueError("masks must be binary")
    stack_p = pred.reshape((-1,) + pred.shape[-2:])
    stack_g = gt.reshape((-1,) + gt.shape[-2:])
    dice, iou, acc, bfs, freq = [], [], [], [], []
    for c in classes:
        pc, gc = pred == c, gt == c
        tp = int(np.sum(pc & gc))
        fp = int(np.sum(pc & ~gc))
        fn = int(np.sum(~pc & gc))
        iou.append(_ratio(tp, tp + fp + fn))
        dice.append(_ratio(2 * tp, 2 * tp + fp + fn))
        acc.append(_ratio(tp, tp + fn))
        per_image = [boundary_f(p == c, g == c, theta) for p, g in zip(stack_p, stack_g)]
        bfs.append(float(np.mean(per_image)))
        freq.append(int(gc.sum()))
    total = sum(freq)
    weighted = sum(f * v for f, v in zip(freq, iou) if v is not None and f) / total if total else None
    return SegReport(
        classes=list(classes),
        dice=dice,
        iou=iou,
        class_accuracy=acc,
        boundary_f=bfs,
        global_acc=float(np.mean(pred == gt)),
        mean_acc=_mean(acc),
        mean_iou=_mean(iou),
        weighted_iou=weighted,
        mean_bfs=_mean(bfs),
    )


# --------------------------------------------------------------------------
# PCA


def pca_project(features, k: int = 3):
    """Project mean-centred rows onto the top-k principal axes.

    Returns ``(projection (N, k), explained_variance_ratio (k,))``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2-D feature matrix with at least two rows")
    n, d = x.shape
    if k > min(n, d):
        raise ValueError(f"k={k} exceeds min(N, D)={min(n, d)}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return xc @ vt[:k].T, ratio


# --------------------------------------------------------------------------
# output


def fmt(v) -> str:
    if v is None:
        return "undefined"
    return f"{v:.2f}"


def write_detection_report(report: DetectionReport, counts: ConfusionCounts, csv_path, kv_path=None) -> None:
    d = report.as_dict()
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("metric,value\n")
        for k in ("tp", "fp", "tn", "fn"):
            fh.write(f"{k},{getattr(counts, k)}\n")
        for k, v in d.items():
            fh.write(f"{k},{fmt(v)}\n")
    if kv_path is not None:
        Path(kv_path).write_text(detection_kv(report, counts), encoding="utf-8")


def detection_kv(report: DetectionReport, counts: ConfusionCounts) -> str:
    lines = [f"{k}={getattr(counts, k)}" for k in ("tp", "fp", "tn", "fn")]
    lines += [f"{k}={fmt(v)}" for k, v in report.as_dict().items()]
    return "\n".join(lines) + "\n"


def write_curve_csv(points: np.ndarray, path, header: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for a, b in points:
            fh.write(f"{float(a)!r},{float(b)!r}\n")


def seg_rows(rep: SegReport) -> list[list[str]]:
    """One row per class plus an aggregate row, values as percentages."""
    p = lambda v: fmt(None if v is None else 100 * v)  # noqa: E731
    rows = [["class", "dice", "iou", "s_acc", "bfs", "global_acc", "mean_acc", "mean_iou", "weighted_iou", "mean_bfs"]]
    for k, c in enumerate(rep.classes):
        rows.append([str(c), p(rep.dice[k]), p(rep.iou[k]), p(rep.class_accuracy[k]), p(rep.boundary_f[k])] + [""] * 5)
    rows.append(["all", "", "", "", "", p(rep.global_acc), p(rep.mean_acc), p(rep.mean_iou), p(rep.weighted_iou),
                 p(rep.mean_bfs)])
    return rows


def write_seg_report(rep: SegReport, csv_path, kv_path=None) -> None:
    with open(csv_path, "w", encoding="utf-8") as fh:
        for row in seg_rows(rep):
            fh.write(",".join(row) + "\n")
    if kv_path is not None:
        Path(kv_path).write_text(seg_kv(rep), encoding="utf-8")


def seg_kv(rep: SegReport) -> str:
    p = lambda v: fmt(None if v is None else 100 * v)  # noqa: E731
    lines = []
    for k, c in enumerate(rep.classes):
        lines += [f"dice_{c}={p(rep.dice[k])}", f"iou_{c}={p(rep.iou[k])}",
                  f"s_acc_{c}={p(rep.class_accuracy[k])}", f"bfs_{c}={p(rep.boundary_f[k])}"]
    lines += [f"global_acc={p(rep.global_acc)}", f"mean_acc={p(rep.mean_acc)}", f"mean_iou={p(rep.mean_iou)}",
              f"weighted_iou={p(rep.weighted_iou)}", f"mean_bfs={p(rep.mean_bfs)}"]
    return "\n".join(lines) + "\n"
