"""
The network at desk scale
=========================

A VGG-16 style encoder held at stride 4, a decoder whose stages see shrunk
copies of every deeper encoder feature, and a large-kernel branch that looks
at the whole image.
"""
# %%
import torch

from i2gfp.network import MattingNet, ModelConfig, decoder_concat_widths, make_input
from i2gfp.synthetic import make_sample

cfg = ModelConfig.desk(64)
print("encoder widths:", cfg.encoder_channels, "GFP kernels:", cfg.gfp_kernels)

# %%
# Feature resolutions
# -------------------
# Only the first two blocks pool, so blocks 3 to 5 stay at a quarter of the input.
sample = make_sample(0, size=64)
x = make_input(sample.image, sample.trimap)[None]
trace = {}
alpha = MattingNet(cfg)(x, trace=trace)
for key in ("E1", "E2", "E3", "E4", "E5", "GFP", "U1"):
    print(f"{key:4s}", tuple(trace[key].shape))
print("alpha", tuple(alpha.shape), f"range [{alpha.min():.3f}, {alpha.max():.3f}]")

# %%
# Decoder widths with and without the dense connections
# -----------------------------------------------------
for use_ic in (True, False):
    c = ModelConfig.desk(64, use_ic=use_ic)
    print("IC" if use_ic else "plain", decoder_concat_widths(c))

# %%
# The full-size configuration
# ----------------------------
# Building on the meta device checks shapes without allocating weights.
with torch.device("meta"):
    big = MattingNet(ModelConfig(input_size=512))
print("512px kernels:", big.cfg.gfp_kernels,
      "parameters:", sum(p.numel() for p in big.parameters()))
