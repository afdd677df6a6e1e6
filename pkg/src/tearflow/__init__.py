"""Tear-film break-up analysis engine.

Submodules cover the numeric core (ops), branch-fused convolution
blocks (reparam), the segmentation model (model), training utilities
(train), evaluation metrics (metrics), the video pipeline (pipeline)
and file formats plus the CLI (container, imageio, annotations, cli).
"""

from .container import load_model, read_weights, write_weights
from .model import (
    TFNet,
    TFNetConfig,
    build,
    forward,
    fuse_model,
    param_count,
    predict_mask,
    variant_config,
)
from .pipeline import RunResult, StageBackends, run_video

__version__ = "0.1.0"

__all__ = [
    "TFNet",
    "TFNetConfig",
    "build",
    "forward",
    "fuse_model",
    "param_count",
    "predict_mask",
    "variant_config",
    "load_model",
    "read_weights",
    "write_weights",
    "RunResult",
    "StageBackends",
    "run_video",
    "__version__",
]
