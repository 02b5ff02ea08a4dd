"""Two-stream UNET segmentation with a gradient-vector-flow input stream.

Everything runs on numpy: a small reverse-mode autodiff engine, the GVF
solver, the network, losses, data handling, training and a CLI.
"""

from .gvf import GvfParams, compute_gvf
from .segnet import ModelConfig, StreamConfig, TwoStreamModel, build_model, predict_patched
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "GvfParams", "ModelConfig", "StreamConfig", "Tensor", "TwoStreamModel", "backward", "build_model",
    "compute_gvf", "no_grad", "predict_patched",
]
