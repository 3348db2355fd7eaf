"""
Scoring mattes
==============

SAD, MSE, gradient and connectivity errors, measured on the unknown band.
SAD, Grad and Conn are reported in thousands.
"""
# %%
import numpy as np
from scipy import ndimage

from i2gfp.metrics import evaluate
from i2gfp.synthetic import make_samples

samples = make_samples(3, size=64, seed=4)

# %%
# Three kinds of mistake
# ----------------------
# A blur, a constant bias and a hard threshold each score differently.
entries = []
for i, s in enumerate(samples):
    entries.append((f"{i}-blur", ndimage.gaussian_filter(s.alpha, 2.0), s.alpha, s.trimap))
    entries.append((f"{i}-bias", np.clip(s.alpha + 0.1, 0, 1), s.alpha, s.trimap))
    entries.append((f"{i}-hard", (s.alpha > 0.5).astype(np.float32), s.alpha, s.trimap))
report = evaluate(entries)
print(report.summary_table())

# %%
# Whole image versus unknown band
# -------------------------------
full = evaluate(entries, region="full")
print("unknown-band SAD", round(report.aggregate["sad"], 4), "whole-image SAD", round(full.aggregate["sad"], 4))
