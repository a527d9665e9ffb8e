"""
Scoring detections and masks
============================

Confusion-matrix metrics, a ROC curve from raw scores, and overlap and
boundary scores for a predicted mask.
"""

import numpy as np

from stmbr import metrics

rng = np.random.default_rng(3)

labels = rng.integers(0, 2, 200)
# a noisy score that leans towards the right answer
scores = np.clip(labels * 0.35 + rng.random(200) * 0.65, 0, 1)

counts = metrics.confusion((scores >= 0.5).astype(int), labels)
report = metrics.detection_metrics(counts)
points, report.roc_auc = metrics.curve_auc(scores, labels, "roc")
_, report.pr_auc = metrics.curve_auc(scores, labels, "pr")
print(metrics.detection_kv(report, counts))
print("ROC has", len(points), "points")

# a disc and the same disc shifted by two pixels
y, x = np.mgrid[:64, :64]
gt = ((y - 32) ** 2 + (x - 30) ** 2 <= 100).astype(np.uint8)
pred = np.roll(gt, 2, axis=1)
rep = metrics.segmentation_metrics(pred, gt)
for row in metrics.seg_rows(rep):
    print(",".join(row))

# the overlap scores always satisfy DS = 2 IoU / (1 + IoU)
iou = rep.iou[1]
print("dice", rep.dice[1], "from iou", 2 * iou / (1 + iou))
