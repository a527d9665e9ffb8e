"""
Screen, then segment
====================

Train a small detector and a small segmenter on phantoms, then run the two
stage pipeline: only slices the detector flags are passed to the segmenter.
Widths are cut down so the whole script finishes in about a minute.
"""

import numpy as np

from stmbr import metrics, workflow
from stmbr.data.phantoms import PhantomSpec, gen_phantoms
from stmbr.models import ModelConfig
from stmbr.train import Hyperparams, split_dataset

cfg = ModelConfig(stem_width=8, stm_widths=(16, 16), hidden=16, seg_widths=(8, 16), input_size=32)

data = gen_phantoms(PhantomSpec(seed=0, count=120, size=32))
train, val, test = split_dataset(data, test_ratio=0.2, val_ratio=0.1, seed=0)

# the detector pretrains its own frozen auxiliary network on the same slices
detector = workflow.fit_detector(train, val, cfg, Hyperparams(lr=0.01, epochs=15), seed=0,
                                 aux_hyper=Hyperparams(lr=0.05, epochs=20))
p = workflow.detect(detector, test)
counts = metrics.confusion((p >= 0.5).astype(int), test.labels())
print("detection accuracy", metrics.fmt(metrics.detection_metrics(counts).accuracy), "%")

# the segmenter learns only from infected slices and reuses the detector's aux net
segmenter = workflow.fit_segmenter(train.infected(), None, cfg, Hyperparams(lr=3e-3, epochs=30), seed=0,
                                   aux=detector.aux)
masks = workflow.segment(segmenter, test.infected())
rep = metrics.segmentation_metrics(masks, test.infected().masks())
print("infected-class dice", metrics.fmt(100 * rep.dice[1]), "iou", metrics.fmt(100 * rep.iou[1]))

result = workflow.run_pipeline(detector, segmenter, test)
print(f"{len(result.ids)} slices, {int(result.detected.sum())} flagged, {len(result.masks)} segmented")
lesion = {sid: int(m.sum()) for sid, m in result.masks.items()}
print("largest predicted lesion:", max(lesion, key=lesion.get) if lesion else None)
print("healthy slices flagged:", int(np.sum(result.detected & (test.labels() == 0))))
