"""On-disk dataset layout.

    <root>/labels.csv       id,label            (UTF-8, header row)
    <root>/images/<id>.pgm
    <root>/masks/<id>.pgm   optional

Slices may instead come from NIfTI volumes: a labels.csv with the extra
columns ``volume`` (path relative to root) and ``slice`` (index into the
volume's slice axis).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .images import read_pgm, write_image_pgm, write_mask_pgm
from .nifti import read_nifti
from .phantoms import Sample, SampleSet


def save_dataset(samples, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "label"])
        for s in samples:
            wr.writerow([s.id, s.label])
            write_image_pgm(s.image, root / "images" / f"{s.id}.pgm")
            write_mask_pgm(s.mask, root / "masks" / f"{s.id}.pgm")
    return root


def load_dataset(root, gzip: bool = True) -> SampleSet:
    root = Path(root)
    labels = root / "labels.csv"
    if not labels.exists():
        raise FileNotFoundError(f"{labels} not found")
    with open(labels, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"id", "label"} <= set(rows[0]):
        raise ValueError(f"{labels}: header must contain id,label")
    volumes: dict[str, np.ndarray] = {}
    out = SampleSet()
    for row in rows:
        sid = row["id"]
        if row.get("volume"):
            vol = volumes.get(row["volume"])
            if vol is None:
                _, vol = read_nifti(root / row["volume"], gzip=gzip)
                volumes[row["volume"]] = vol
            image = vol[int(row["slice"]), 0]
        else:
            image = read_pgm(root / "images" / f"{sid}.pgm")
        mpath = root / "masks" / f"{sid}.pgm"
        mask = (read_pgm(mpath) > 0.5).astype(np.uint8) if mpath.exists() else np.zeros(image.shape, np.uint8)
        out.append(Sample(id=sid, image=image, label=int(row["label"]), mask=mask))
    return out
