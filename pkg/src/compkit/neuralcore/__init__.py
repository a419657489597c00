"""
The differentiable substrate of the fusion and refinement networks, built on torch autograd:
layers and dense blocks, losses, Adam, finite-difference gradient checks, and the checkpoint container.
"""

from .checkpoint import MAGIC, load_checkpoint, load_state_arrays, save_checkpoint, state_arrays
from .gradcheck import core_gradcheck_cases, grad_check
from .layers import (
    ACTIVATIONS,
    ConvLayer,
    DenseBlock,
    DenseBlockSpec,
    UpConvLayer,
    conv2d,
    count_parameters,
    dense_block,
    elu,
    get_activation,
    he_uniform_init,
    relu,
    sigmoid,
    transposed_conv2d,
    zero_init,
)
from .losses import CE_EPS, cross_entropy, l1_loss, mse_loss
from .optim import adam_step, make_adam, seed_everything

__all__ = [
    "MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "state_arrays",
    "load_state_arrays",
    "grad_check",
    "core_gradcheck_cases",
    "ACTIVATIONS",
    "get_activation",
    "relu",
    "sigmoid",
    "elu",
    "conv2d",
    "transposed_conv2d",
    "DenseBlockSpec",
    "dense_block",
    "DenseBlock",
    "ConvLayer",
    "UpConvLayer",
    "he_uniform_init",
    "zero_init",
    "count_parameters",
    "CE_EPS",
    "l1_loss",
    "mse_loss",
    "cross_entropy",
    "make_adam",
    "adam_step",
    "seed_everything",
]
