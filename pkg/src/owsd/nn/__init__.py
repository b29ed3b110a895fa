"""Minimal float64 layer engine: sequential networks, hand-written
gradients, ADAM, and binary tensor framing."""

from . import specs
from .functional import conv2d, conv2d_transpose, softmax
from .layers import Parameter
from .network import Network, cross_entropy, half_mse
from .optim import Adam
from .specs import LayerSpec
from .training import iterate_minibatches, one_hot, train_classifier

__all__ = [
    "Adam",
    "LayerSpec",
    "Network",
    "Parameter",
    "conv2d",
    "conv2d_transpose",
    "cross_entropy",
    "half_mse",
    "iterate_minibatches",
    "one_hot",
    "softmax",
    "specs",
    "train_classifier",
]
