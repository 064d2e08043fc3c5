from .layers import (
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool2d,
    ReLU,
    ShapeError,
    Softplus,
    conv_out_size,
    dropout_mask,
    sigmoid,
)
from .network import GradientTape, Network, StaleTapeError
from .optim import AdamState, NonFiniteGradientError, adam_step
from .io import CheckpointError, load_network, save_network

__all__ = [
    "AdamState", "CheckpointError", "Conv2d", "Dense", "Dropout", "Flatten",
    "GradientTape", "LayerSpec", "MaxPool2d", "Network", "NonFiniteGradientError",
    "ReLU", "ShapeError", "Softplus", "StaleTapeError", "adam_step",
    "conv_out_size", "dropout_mask", "load_network", "save_network", "sigmoid",
]
