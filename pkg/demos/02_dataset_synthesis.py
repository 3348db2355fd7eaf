"""
Building a training set
=======================

Composite each foreground onto several backgrounds, write the dataset tree
and a manifest, then draw augmented training crops from it.
"""
# %%
# A toy source corpus
# -------------------
import tempfile
from pathlib import Path

import numpy as np

from i2gfp.data_pipeline import AugmentationConfig, DatasetSpec, MattingDataset, synthesize_dataset
from i2gfp.matting_core import save_alpha, save_rgb
from i2gfp.synthetic import smooth_field, soft_blob_alpha

root = Path(tempfile.mkdtemp())
rng = np.random.default_rng(1)
for sub in ("fg", "alpha", "bg"):
    (root / sub).mkdir()
for i in range(2):
    save_rgb(root / "fg" / f"obj{i}.png", smooth_field(rng, 48))
    save_alpha(root / "alpha" / f"obj{i}.png", soft_blob_alpha(rng, 48))
for j in range(3):
    # backgrounds of other sizes are scaled and cropped to fit
    save_rgb(root / "bg" / f"scene{j}.png", smooth_field(rng, 56 + 8 * j, sigma=3.0))

# %%
# Synthesis
# ---------
# Every sample's background choice and trimap radius come from a seed derived
# from the run seed and the sample index, so reruns are byte-identical.
spec = DatasetSpec(root / "fg", root / "alpha", root / "bg", root / "data",
                   backgrounds_per_foreground=2, seed=7)
records = synthesize_dataset(spec)
for rec in records:
    print(rec["name"], rec["merged"], rec["trimap"])

# %%
# Augmented draws
# ---------------
# Crops are centred on unknown pixels, then resized to the training size.
aug = AugmentationConfig(crop_sizes=(32, 40, 48), train_size=32, seed=7)
dataset = MattingDataset.from_manifest(root / "data" / "manifest.jsonl", aug)
draw_rng = np.random.default_rng(0)
sample = dataset.draw(0, draw_rng)
print("augmented sample:", sample.image.shape, "unknown pixels:", int((sample.trimap == 1).sum()))
