"""
Synthetic lung slices and the files they travel in
==================================================

Generate phantoms with exact lesion masks, round-trip a volume through a
NIfTI-1 file, and write a mask and an overlay to disk.
"""

import tempfile
from pathlib import Path

import numpy as np

from stmbr.data.images import write_mask_pgm, write_overlay_ppm
from stmbr.data.nifti import read_nifti, write_nifti
from stmbr.data.phantoms import PhantomSpec, gen_phantoms

samples = gen_phantoms(PhantomSpec(seed=7, count=12))
print(len(samples), "slices,", len(samples.infected()), "infected")

sick = samples.infected()[0]
print(sick.id, "lesion fraction", round(float(sick.mask.mean()), 3))

out = Path(tempfile.mkdtemp(prefix="stmbr_demo_"))

# NIfTI stores x fastest, so the slice stack is transposed into (x, y, z)
stack = samples.images()[:, 0]
volume = np.round(np.transpose(stack, (2, 1, 0)) * 1000).astype(np.int16)
write_nifti(out / "phantoms.nii", volume, spacing=(0.8, 0.8, 2.5))
meta, slices = read_nifti(out / "phantoms.nii")
print("read back", meta.dims, "datatype", meta.datatype, "slices", slices.shape)
# the reader rescales the whole volume to [0, 1]; compare against the same rescaling
q = volume.astype(float)
expected = np.transpose((q - q.min()) / (q.max() - q.min()), (2, 1, 0))
print("max abs difference", float(np.abs(slices[:, 0] - expected).max()))

write_mask_pgm(sick.mask, out / "mask.pgm")
write_overlay_ppm(sick.image, sick.mask, out / "overlay.ppm")
print("wrote", sorted(p.name for p in out.iterdir()), "to", out)
