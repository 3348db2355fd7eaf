"""
The training loss
=================

Four terms: masked L1 on alpha, the compositing error of the re-blended
image, a masked gradient term, and a weighted Laplacian-pyramid term.
"""
# %%
import torch

from i2gfp.losses import LAPLACIAN_WEIGHTS, build_pyramid, collapse_pyramid, matting_loss
from i2gfp.synthetic import make_samples
from i2gfp.trainer import collate

batch = collate(make_samples(2, size=64, seed=3))
gt, mask = batch["gt"], batch["mask"]

# %%
# A perfect prediction costs nothing
# ----------------------------------
total, parts = matting_loss(gt, gt, mask, batch["image"], batch["fg"], batch["bg"])
print("pred = gt:", parts.as_dict())

# %%
# A blurred prediction
# --------------------
# Blurring mostly hurts the fine pyramid bands and the gradient term.
blurred = torch.nn.functional.avg_pool2d(gt, 5, stride=1, padding=2, count_include_pad=False)
_, parts = matting_loss(blurred, gt, mask, batch["image"], batch["fg"], batch["bg"])
print("blurred:", {k: round(v, 5) for k, v in parts.as_dict().items() if k != "comp_skipped"})

# %%
# The pyramid is invertible
# -------------------------
pyr = build_pyramid(gt)
print("bands:", [tuple(b.shape[-2:]) for b in pyr], "weights:", LAPLACIAN_WEIGHTS)
print("collapse error:", float((collapse_pyramid(pyr) - gt).abs().max()))
