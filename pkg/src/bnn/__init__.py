"""Binary neural networks: STE training, bit-packed XNOR/popcount inference."""

from .autodiff import STEConfig, Slot, Tape, sign_backward, sign_forward
from .bittensor import BitTensor, binary_dot, binary_gemm, pack, unpack
from .arch import (
    DenseNetSpec,
    ModelGraph,
    build_densenet,
    build_lenet,
    build_model,
    build_resnet,
    count_params,
    densenet_depth,
    model_size_bytes,
)
from .layers import QLayerConfig, compute_scaling_factor
from .train import TrainConfig, TrainReport

__version__ = "0.1.0"

__all__ = [
    "BitTensor",
    "DenseNetSpec",
    "ModelGraph",
    "QLayerConfig",
    "STEConfig",
    "Slot",
    "Tape",
    "TrainConfig",
    "TrainReport",
    "binary_dot",
    "binary_gemm",
    "build_densenet",
    "build_lenet",
    "build_model",
    "build_resnet",
    "compute_scaling_factor",
    "count_params",
    "densenet_depth",
    "model_size_bytes",
    "pack",
    "sign_backward",
    "sign_forward",
    "unpack",
]
