"""Image matting with intensive connections and global foreground perception,
scaled so that every piece runs on a CPU."""
from .matting_core import Label, MattingSample, composite, generate_trimap, unknown_mask
from .network import ModelConfig, MattingNet, build_model
from .trainer import TrainConfig

__all__ = ["Label", "MattingSample", "composite", "generate_trimap", "unknown_mask",
           "ModelConfig", "MattingNet", "build_model", "TrainConfig"]
__version__ = "0.1.0"
