"""
Central finite-difference verification of analytic (autograd) gradients.
"""

from typing import Callable, Dict, Sequence

import torch

from ..errors import UsageError
from . import layers, losses

__all__ = ["grad_check", "core_gradcheck_cases"]


def _as_leaf(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor) and x.is_leaf and x.requires_grad:
        if x.dtype != torch.float64:
            raise UsageError(f"Gradient checks need float64 parameters, got {x.dtype}")
        return x
    return torch.as_tensor(x, dtype=torch.float64).detach().clone().requires_grad_(True)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-3,
    floor: float = 1e-8,
    relative_floor: float = 0.0,
) -> float:
    """
    Compares the autograd gradient of the scalar ``fn(*inputs)`` with central differences (f(x+h) - f(x-h)) / 2h,
    one coordinate at a time, in double precision.

    Tensors that are already float64 leaves requiring grad (e.g., the parameters of a float64 module used inside
    `fn`) are perturbed in place; any other input is copied to a float64 leaf first.

    :param floor: lower bound of the denominator of the relative error.
    :param relative_floor: additional lower bound of the denominator, as a fraction of the largest analytic gradient
        entry.  Only the built-in suites set it; the default 0 keeps the plain relative error.
    :return: the maximum over all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if not h > 0:
        raise UsageError(f"Finite difference step must be positive, got {h}")
    xs = [_as_leaf(x) for x in inputs]

    out = fn(*xs)
    if out.numel() != 1:
        raise UsageError(f"grad_check needs a scalar function, got output shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a.detach() for x, a in zip(xs, analytic)]

    scale = max((a.abs().max().item() for a in analytic if a.numel() > 0), default=0.0)
    denominator_floor = max(floor, relative_floor * scale)

    max_err = 0.0
    with torch.no_grad():
        for x, a in zip(xs, analytic):
            flat = x.detach().view(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(fn(*xs))
                flat[i] = orig - h
                f_minus = float(fn(*xs))
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = a_flat[i].item()
                err = abs(ana - numeric) / max(abs(ana), abs(numeric), denominator_floor)
                max_err = max(max_err, err)
    return max_err


def _rand(gen: torch.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> torch.Tensor:
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def _away_from_zero(gen: torch.Generator, *shape: int) -> torch.Tensor:
    """Values with |v| in [0.1, 1], so that kinks at zero are never crossed by small perturbations."""
    sign = 1.0 - 2.0 * (torch.rand(*shape, generator=gen, dtype=torch.float64) < 0.5).to(torch.float64)
    return sign * _rand(gen, *shape, low=0.1, high=1.0)


def core_gradcheck_cases(seed: int = 0) -> Dict[str, Callable[[float], float]]:
    """
    The per-operation gradient suite: each case maps a finite difference step to the max relative error.
    All tensors have every dimension <= 8.
    """
    cases: Dict[str, Callable[[float], float]] = {}

    def case(name: str):
        def register(builder: Callable[[torch.Generator, float], float]):
            def run(h: float) -> float:
                return builder(torch.Generator().manual_seed(seed), h)

            cases[name] = run
            return builder

        return register

    @case("sum")
    def _sum(gen, h):
        return grad_check(lambda x: x.sum(), [_rand(gen, 2, 3, 4)], h)

    @case("conv2d")
    def _conv2d(gen, h):
        x, w, b = _rand(gen, 1, 2, 5, 5), _rand(gen, 3, 2, 3, 3), _rand(gen, 3)
        target = _rand(gen, 1, 3, 2, 2)
        return grad_check(lambda x, w, b: (layers.conv2d(x, w, b, stride=2, padding=0) * target).sum(), [x, w, b], h)

    @case("conv2d_padded")
    def _conv2d_padded(gen, h):
        x, w = _rand(gen, 2, 4, 6, 6), _rand(gen, 2, 4, 3, 3)
        return grad_check(lambda x, w: (layers.conv2d(x, w, padding=1) ** 2).mean(), [x, w], h)

    @case("transposed_conv2d")
    def _transposed_conv2d(gen, h):
        x, w, b = _rand(gen, 1, 3, 4, 4), _rand(gen, 3, 2, 4, 4), _rand(gen, 2)
        return grad_check(
            lambda x, w, b: (layers.transposed_conv2d(x, w, b, stride=2, padding=1) ** 2).mean(), [x, w, b], h
        )

    @case("dense_block")
    def _dense_block(gen, h):
        spec = layers.DenseBlockSpec(num_layers=2, growth_rate=2)
        x = _rand(gen, 1, 3, 6, 6)
        (s0, s1) = spec.weight_shapes(3)
        w0, b0, w1, b1 = _rand(gen, *s0), _rand(gen, s0[0]), _rand(gen, *s1), _rand(gen, s1[0])
        return grad_check(
            lambda x, w0, b0, w1, b1: (layers.dense_block(x, spec, [(w0, b0), (w1, b1)], "elu") ** 2).mean(),
            [x, w0, b0, w1, b1],
            h,
            relative_floor=1e-3,
        )

    @case("relu")
    def _relu(gen, h):
        x, c = _away_from_zero(gen, 2, 3, 4, 4), _rand(gen, 2, 3, 4, 4)
        return grad_check(lambda x: (layers.relu(x) * c).sum(), [x], h)

    @case("elu")
    def _elu(gen, h):
        x, c = _rand(gen, 2, 3, 4, 4, low=-2.0, high=2.0), _rand(gen, 2, 3, 4, 4)
        return grad_check(lambda x: (layers.elu(x) * c).sum(), [x], h)

    @case("sigmoid")
    def _sigmoid(gen, h):
        x, c = _rand(gen, 2, 3, 4, 4, low=-3.0, high=3.0), _rand(gen, 2, 3, 4, 4)
        return grad_check(lambda x: (layers.sigmoid(x) * c).sum(), [x], h)

    @case("l1_loss")
    def _l1_loss(gen, h):
        target = _rand(gen, 1, 3, 4, 4, low=0.0, high=1.0)
        pred = target + _away_from_zero(gen, 1, 3, 4, 4) * 0.5
        return grad_check(lambda p: losses.l1_loss(p, target), [pred], h)

    @case("cross_entropy")
    def _cross_entropy(gen, h):
        prob = _rand(gen, 1, 1, 6, 6, low=0.05, high=0.95)
        target = (torch.rand(1, 1, 6, 6, generator=gen, dtype=torch.float64) < 0.5).to(torch.float64)
        return grad_check(lambda p: losses.cross_entropy(p, target), [prob], h)

    return cases
