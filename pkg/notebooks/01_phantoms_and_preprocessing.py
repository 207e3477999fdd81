"""Walk through the synthetic corpus: generation, preprocessing and a patch draw.

Run with ``python3 notebooks/01_phantoms_and_preprocessing.py [out_dir]``.
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from bxlstm_petct.augment import AugmentConfig
from bxlstm_petct.data import PatchSampler, load_samples
from bxlstm_petct.phantom import PhantomSpec, generate_corpus
from bxlstm_petct.slices import export_slices
from bxlstm_petct.volume_io import preprocess_case, read_case

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

# A phantom is a noisy ellipsoidal body with a couple of organs and 1-3 hot lesions.
# Each case gets its own seeded stream, so case 3 is identical whether 4 or 400 are generated.
manifest = generate_corpus(PhantomSpec(seed=0), 4, out / "corpus")
print("cases:", manifest["cases"])

case = read_case(out / "corpus", "case_000")
print("CT HU range", case.ct.data.min(), case.ct.data.max())
print("PET SUV range", case.pet.data.min(), case.pet.data.max())
print("lesion voxels", int(case.mask.data.sum()))

# Preprocessing resamples to 1 mm and z-scores CT (on body voxels, after clipping) and PET.
pre = preprocess_case(case)
body = pre.ct.data > pre.ct.data.min()
print(f"normalized CT mean {pre.ct.data[body].mean():+.3f}, PET mean {pre.pet.data.mean():+.3f} std {pre.pet.data.std():.3f}")

# Patches are cropped (half of them centred on a lesion) and then augmented.
samples = load_samples(out / "corpus", manifest["cases"])
images, masks, picked = PatchSampler(samples, (32, 48, 40), seed=0, aug=AugmentConfig()).draw(2)
print("patch batch", images.shape, "foreground fraction", float(masks.mean()))

# The PGM export shows the slices through the lesion centre with the mask contour.
written = export_slices("case_000", case.pet.data, case.mask.data, case.mask.data, out / "slices")
print("wrote", [p.name for p in written])
print("output in", out)
