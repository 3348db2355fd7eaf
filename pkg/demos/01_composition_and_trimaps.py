"""
Compositing and trimaps
=======================

Blend a foreground over a background with a matte, then derive the trimap
that tells a matting network where opacity is unknown.
"""
# %%
# A soft synthetic object
# -----------------------
# ``soft_blob_alpha`` draws a blob with a feathered edge, so the matte has a
# band of fractional values between 0 and 1.
import numpy as np

from i2gfp.matting_core import Label, composite, generate_trimap, unknown_mask
from i2gfp.synthetic import smooth_field, soft_blob_alpha

rng = np.random.default_rng(0)
alpha = soft_blob_alpha(rng, 64)
fg, bg = smooth_field(rng, 64), smooth_field(rng, 64, sigma=3.0)
print("fractional pixels:", int(((alpha > 0) & (alpha < 1)).sum()))

# %%
# Compositing
# -----------
# Where alpha is 1 the image is the foreground exactly, where it is 0 the
# background.  In between the colours mix linearly.
image = composite(fg, bg, alpha)
assert np.array_equal(image[alpha == 1], fg[alpha == 1])
assert np.array_equal(image[alpha == 0], bg[alpha == 0])

# %%
# Trimaps
# -------
# The unknown band is the fractional region grown by a square of side
# ``2r + 1``.  A wider radius hands the network more pixels to decide.
for radius in (0, 2, 6):
    tri = generate_trimap(alpha, radius)
    counts = {lab.name.lower(): int((tri == lab).sum()) for lab in Label}
    print(f"r={radius}:", counts)

# every fractional pixel is always inside the unknown band
assert unknown_mask(generate_trimap(alpha, 3))[(alpha > 0) & (alpha < 1)].all()
