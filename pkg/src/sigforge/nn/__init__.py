"""Small float64 neural-network substrate with hand-derived gradients."""

from .losses import (
    AdversarialPair,
    EncoderDecoder,
    LossValue,
    NonFiniteLossError,
    SgdState,
    grad_check,
    loss_and_grad,
    numeric_grad,
    sgd_momentum_step,
)
from .network import (
    LayerSpec,
    Network,
    ShapeError,
    activation,
    backward,
    conv2d,
    dense,
    forward,
    init_network,
    output,
    zero_network,
)
from .serialize import FORMAT_VERSION, ModelFormatError, load_network, save_network

__all__ = [
    "AdversarialPair",
    "EncoderDecoder",
    "FORMAT_VERSION",
    "LayerSpec",
    "LossValue",
    "ModelFormatError",
    "Network",
    "NonFiniteLossError",
    "SgdState",
    "ShapeError",
    "activation",
    "backward",
    "conv2d",
    "dense",
    "forward",
    "grad_check",
    "init_network",
    "load_network",
    "loss_and_grad",
    "numeric_grad",
    "output",
    "save_network",
    "sgd_momentum_step",
    "zero_network",
]
