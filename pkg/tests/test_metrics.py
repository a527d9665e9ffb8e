from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import detection_exact, pixel_counts, rank_pair_auc
from stmbr.metrics import (
    ConfusionCounts,
    confusion,
    curve_auc,
    detection_kv,
    detection_metrics,
    f_score,
    pca_project,
    seg_kv,
    seg_rows,
    segmentation_metrics,
    write_curve_csv,
    write_detection_report,
)


# -- confusion and detection metrics ---------------------------------------------------


def test_confusion_trivial_cases():
    assert confusion(np.ones(10), np.ones(10)) == ConfusionCounts(tp=10)
    c = confusion([1, 0, 1, 0], [0, 1, 0, 1])
    assert c.tp == c.tn == 0 and c.fp == c.fn == 2
    with pytest.raises(ValueError):
        confusion([], [])
    with pytest.raises(ValueError):
        confusion([1, 0], [1])


def test_counts_merge_by_addition():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 2, 100), rng.integers(0, 2, 100)
    assert confusion(p[:40], t[:40]) + confusion(p[40:], t[40:]) == confusion(p, t)


def test_confusion_and_metrics_match_brute_force_on_1000_vectors():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        p, t = rng.integers(0, 2, n), rng.integers(0, 2, n)
        c = confusion(p, t)
        brute = (
            sum(a == 1 and b == 1 for a, b in zip(p, t)),
            sum(a == 1 and b == 0 for a, b in zip(p, t)),
            sum(a == 0 and b == 0 for a, b in zip(p, t)),
            sum(a == 0 and b == 1 for a, b in zip(p, t)),
        )
        assert (c.tp, c.fp, c.tn, c.fn) == brute
        got = detection_metrics(c).as_dict()
        for k, v in detection_exact(*brute).items():
            if v is None:
                assert got[k] is None
            else:
                assert got[k] == pytest.approx(v, abs=1e-12)


def test_mcc_direct_formula_value():
    r = detection_metrics(ConfusionCounts(tp=90, fp=5, tn=85, fn=10))
    assert r.mcc == pytest.approx(0.8433, abs=5e-5)
    assert r.mcc == pytest.approx(detection_exact(90, 5, 85, 10)["mcc"], abs=1e-15)


def test_perfect_detection():
    r = detection_metrics(ConfusionCounts(tp=50, tn=50))
    assert r.accuracy == 100.0 and r.mcc == 1.0 and r.f_score == 100.0


def test_f_score_of_published_precision_and_recall():
    assert f_score(98.09, 98.12) == pytest.approx(98.11, abs=0.01)


def test_zero_denominators_are_undefined_not_nan():
    r = detection_metrics(ConfusionCounts(tn=10))
    assert r.precision is None and r.recall is None and r.f_score is None and r.mcc is None
    assert r.specificity == 100.0
    assert "precision=undefined" in detection_kv(r, ConfusionCounts(tn=10))


# -- curves --------------------------------------------------------------------------


def test_hand_case_auc_is_eight_ninths():
    scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
    labels = [1, 1, 0, 1, 0, 0]
    pts, auc = curve_auc(scores, labels)
    assert auc == pytest.approx(8 / 9, abs=1e-15)
    assert tuple(pts[0]) == (0.0, 0.0) and tuple(pts[-1]) == (1.0, 1.0)


def test_separated_and_random_scores():
    assert curve_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[1] == 1.0
    rng = np.random.default_rng(2)
    labels = np.repeat([0, 1], 5000)
    assert abs(curve_auc(rng.random(10_000), labels)[1] - 0.5) <= 0.02


def test_tied_scores_form_one_threshold():
    pts, auc = curve_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert pts.shape == (2, 2) and auc == 0.5


def test_pr_curve_shape():
    pts, auc = curve_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0], kind="pr")
    assert tuple(pts[0]) == (0.0, 1.0) and auc == 1.0
    assert np.all((pts >= 0) & (pts <= 1))


def test_curve_errors():
    with pytest.raises(ValueError):
        curve_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        curve_auc([0.1, 0.2], [1, 0], kind="lift")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=20))
def test_roc_auc_equals_rank_pair_fraction(pairs):
    labels = [int(b) for _, b in pairs]
    if len(set(labels)) < 2:
        return
    scores = [s / 6 for s, _ in pairs]  # coarse grid forces ties
    expect = rank_pair_auc(scores, labels)
    assert Fraction(curve_auc(scores, labels)[1]).limit_denominator(10**6) == expect


# -- segmentation ---------------------------------------------------------------------


def _ellipse(h, w, cy, cx, ry, rx):
    y, x = np.mgrid[:h, :w]
    return (((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1).astype(np.uint8)


def test_identical_masks_score_one():
    m = _ellipse(32, 32, 16, 16, 8, 5)
    rep = segmentation_metrics(m, m)
    vals = rep.dice + rep.iou + rep.class_accuracy + rep.boundary_f
    vals += [rep.global_acc, rep.mean_acc, rep.mean_iou, rep.weighted_iou, rep.mean_bfs]
    assert all(v == 1.0 for v in vals)


def test_half_coverage_closed_form():
    gt = np.zeros((8, 8), np.uint8)
    gt[2:6, 2:6] = 1
    pred = np.zeros_like(gt)
    pred[2:6, 2:4] = 1
    fg = segmentation_metrics(pred, gt).for_class(1)
    assert fg["iou"] == 0.5 and fg["dice"] == pytest.approx(2 / 3, abs=1e-15) and fg["class_accuracy"] == 0.5


def test_random_masks_match_pixel_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        gt = (rng.random((32, 32)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        pred = (rng.random((32, 32)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        rep = segmentation_metrics(pred, gt)
        for k, c in enumerate((0, 1)):
            tp, fp, fn = pixel_counts(pred, gt, c)
            assert rep.iou[k] == tp / (tp + fp + fn)
            assert rep.dice[k] == 2 * tp / (2 * tp + fp + fn)
            assert rep.dice[k] == pytest.approx(2 * rep.iou[k] / (1 + rep.iou[k]), abs=1e-12)
        assert 0 <= rep.weighted_iou <= 1 and 0 <= rep.mean_bfs <= 1


def test_one_class_weighted_iou_equals_that_class():
    gt = np.zeros((16, 16), np.uint8)
    pred = gt.copy()
    pred[:4, :4] = 1
    rep = segmentation_metrics(pred, gt)
    assert rep.weighted_iou == rep.iou[0]
    assert rep.iou[1] == 0.0 and rep.class_accuracy[1] is None


def test_boundary_f_tolerates_small_shift():
    gt = _ellipse(64, 64, 32, 32, 12, 9)
    shifted = np.roll(gt, 1, axis=1)
    far = np.roll(gt, 6, axis=1)
    near = segmentation_metrics(shifted, gt).for_class(1)["boundary_f"]
    away = segmentation_metrics(far, gt).for_class(1)["boundary_f"]
    assert near == 1.0 and away < 0.8


def test_segmentation_errors():
    with pytest.raises(ValueError, match="binary"):
        segmentation_metrics(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        segmentation_metrics(np.zeros((2, 2)), np.zeros((3, 2)))


def test_segmentation_report_rows():
    gt = _ellipse(16, 16, 8, 8, 4, 4)
    rep = segmentation_metrics(gt, gt)
    rows = seg_rows(rep)
    assert rows[0][0] == "class" and rows[1][:3] == ["0", "100.00", "100.00"] and rows[-1][0] == "all"
    assert "weighted_iou=100.00" in seg_kv(rep)


# -- PCA ----------------------------------------------------------------------------


def test_collinear_points_have_one_component():
    t = np.linspace(-3, 5, 40)
    _, ratio = pca_project(np.column_stack([t, 2 * t + 1]), k=2)
    assert ratio[0] == pytest.approx(1.0, abs=1e-9)


def test_full_rank_projection_preserves_distances():
    x = np.random.default_rng(4).normal(size=(20, 5))
    proj, ratio = pca_project(x, k=5)
    d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)  # noqa: E731
    np.testing.assert_allclose(d(proj), d(x), atol=1e-9)
    assert np.all(np.diff(ratio) <= 0) and ratio.sum() <= 1 + 1e-12


def test_reconstruction_error_equals_discarded_eigenvalues():
    x = np.random.default_rng(5).normal(size=(50, 10)) * np.arange(1, 11)
    xc = x - x.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(xc.T @ xc))[::-1]
    for k in (1, 3, 7):
        proj, _ = pca_project(x, k)
        # proj = xc V_k, so the reconstruction is proj V_k^T; recover V_k by least squares
        v, *_ = np.linalg.lstsq(xc, proj, rcond=None)
        err = np.sum((xc - proj @ v.T) ** 2)
        assert err == pytest.approx(eig[k:].sum(), abs=1e-6)


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        pca_project(np.zeros((5, 2)), k=3)


# -- output files -------------------------------------------------------------------


def test_report_files(tmp_path):
    c = ConfusionCounts(tp=3, fp=1, tn=4, fn=0)
    r = detection_metrics(c)
    write_detection_report(r, c, tmp_path / "d.csv", tmp_path / "d.txt")
    lines = (tmp_path / "d.csv").read_text(encoding="utf-8").splitlines()
    assert lines[:2] == ["metric,value", "tp,3"] and "accuracy,87.50" in lines
    assert "roc_auc,undefined" in lines
    assert (tmp_path / "d.txt").read_text().startswith("tp=3\nfp=1\n")
    pts, _ = curve_auc([0.9, 0.1], [1, 0])
    write_curve_csv(pts, tmp_path / "roc.csv", "fpr,tpr")
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "fpr,tpr"
