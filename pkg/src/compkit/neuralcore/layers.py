"""
Convolution primitives, activations and dense blocks on top of torch.

Tensors are laid out (batch, channels, height, width).  The functional forms check shapes and raise
`ShapeMismatchError` with both shapes, instead of torch's generic runtime errors.
"""

import dataclasses
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatchError, UsageError

__all__ = [
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
]


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def elu(x: torch.Tensor) -> torch.Tensor:
    return F.elu(x)


ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
}


def get_activation(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UsageError(f"Unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def _check_4d(what: str, x: torch.Tensor):
    if x.dim() != 4:
        raise ShapeMismatchError(f"{what} (expected a 4-D tensor)", [tuple(x.shape)])


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """
    Cross-correlation with zero padding.  weight is (out_channels, in_channels, kh, kw); the output spatial size is
    floor((in + 2 * padding - k) / stride) + 1.
    """
    _check_4d("conv2d input", x)
    _check_4d("conv2d weight", weight)
    if stride < 1:
        raise UsageError(f"conv2d stride must be >= 1, got {stride}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError("conv2d channels (input vs. weight)", [tuple(x.shape), tuple(weight.shape)])
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeMismatchError("conv2d bias", [tuple(bias.shape), (weight.shape[0],)])
    if x.shape[2] + 2 * padding < weight.shape[2] or x.shape[3] + 2 * padding < weight.shape[3]:
        raise ShapeMismatchError("conv2d (kernel larger than padded input)", [tuple(x.shape), tuple(weight.shape)])
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def transposed_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """
    The gradient of `conv2d` with respect to its input, used as an upsampling layer.  weight is
    (in_channels, out_channels, kh, kw); the output spatial size is (in - 1) * stride - 2 * padding + k, so kernel 4,
    stride 2, padding 1 exactly doubles the input.
    """
    _check_4d("transposed_conv2d input", x)
    _check_4d("transposed_conv2d weight", weight)
    if stride < 1:
        raise UsageError(f"transposed_conv2d stride must be >= 1, got {stride}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError(
            "transposed_conv2d channels (input vs. weight)", [tuple(x.shape), tuple(weight.shape)]
        )
    if bias is not None and tuple(bias.shape) != (weight.shape[1],):
        raise ShapeMismatchError("transposed_conv2d bias", [tuple(bias.shape), (weight.shape[1],)])
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


# ==========
# dense blocks
# ==========


@dataclasses.dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int
    growth_rate: int
    kernel: int = 3

    def __post_init__(self):
        if self.num_layers < 0:
            raise UsageError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.growth_rate < 1:
            raise UsageError(f"growth_rate must be >= 1, got {self.growth_rate}")
        if self.kernel != 3:
            raise UsageError(f"Dense blocks use 3x3 kernels, got {self.kernel}")

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.num_layers * self.growth_rate

    def weight_shapes(self, in_channels: int) -> Tuple[Tuple[int, int, int, int], ...]:
        return tuple(
            (self.growth_rate, in_channels + i * self.growth_rate, self.kernel, self.kernel)
            for i in range(self.num_layers)
        )


def dense_block(
    x: torch.Tensor,
    spec: DenseBlockSpec,
    params: Sequence[Tuple[torch.Tensor, Optional[torch.Tensor]]],
    activation: str = "relu",
) -> torch.Tensor:
    """
    Each layer applies a 3x3 convolution (padding 1) to the concatenation of the block input and all previous layer
    outputs, followed by the activation.  The block output is the concatenation of the input and all layer outputs.

    :param params: one (weight, bias) pair per layer.
    """
    _check_4d("dense block input", x)
    if len(params) != spec.num_layers:
        raise ShapeMismatchError("dense block parameters (layer count)", [(len(params),), (spec.num_layers,)])
    act = get_activation(activation)
    expected = spec.weight_shapes(x.shape[1])

    features = [x]
    for (weight, bias), shape in zip(params, expected):
        if tuple(weight.shape) != shape:
            raise ShapeMismatchError("dense block weight", [tuple(weight.shape), shape])
        features.append(act(conv2d(torch.cat(features, dim=1), weight, bias, stride=1, padding=1)))
    return torch.cat(features, dim=1)


class DenseBlock(nn.Module):
    def __init__(self, in_channels: int, spec: DenseBlockSpec, activation: str = "relu"):
        super().__init__()
        get_activation(activation)
        self.spec = spec
        self.activation = activation
        self.in_channels = in_channels
        self.out_channels = spec.out_channels(in_channels)
        self.layers = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=k, padding=1) for c_out, c_in, k, _ in spec.weight_shapes(in_channels)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dense_block(x, self.spec, [(conv.weight, conv.bias) for conv in self.layers], self.activation)


# ==========
# modules
# ==========


class ConvLayer(nn.Conv2d):
    """`nn.Conv2d` parameters, applied through the shape-checked `conv2d`."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride[0], padding=self.padding[0])


class UpConvLayer(nn.ConvTranspose2d):
    """`nn.ConvTranspose2d` parameters, applied through the shape-checked `transposed_conv2d`."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return transposed_conv2d(x, self.weight, self.bias, stride=self.stride[0], padding=self.padding[0])


# ==========
# initialization
# ==========


def he_uniform_init(module: nn.Module) -> nn.Module:
    """Fan-in scaled uniform (He) initialization of every convolution weight; biases start at zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return module


def zero_init(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
