"""
Adam optimization and seeding.

Parameters are `torch.nn.Parameter`s; their Adam state (first and second moments, step count) lives in the
`torch.optim.Adam` instance returned by `make_adam`.
"""

import random
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import ShapeMismatchError, UsageError

__all__ = ["make_adam", "adam_step", "seed_everything"]


def make_adam(
    params: Iterable[torch.nn.Parameter],
    lr: float = 2e-3,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    if not lr > 0:
        raise UsageError(f"Learning rate must be positive, got {lr}")
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def adam_step(
    optimizer: torch.optim.Optimizer,
    params: Sequence[torch.nn.Parameter],
    grads: Sequence[torch.Tensor],
):
    """
    Applies one bias-corrected Adam update with explicitly given gradients (instead of the ones accumulated by
    backward).
    """
    if len(params) != len(grads):
        raise ShapeMismatchError("adam step (parameter vs. gradient count)", [(len(params),), (len(grads),)])
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError("adam step gradient", [tuple(p.shape), tuple(g.shape)])
        p.grad = g.detach().to(dtype=p.dtype).clone()
    optimizer.step()


def seed_everything(seed: int, threads: Optional[int] = None):
    """
    Seeds python, numpy and torch, and switches torch to deterministic algorithms.
    With ``threads=1`` a fixed seed reproduces training bit for bit.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if threads is not None:
        if threads < 1:
            raise UsageError(f"threads must be >= 1, got {threads}")
        torch.set_num_threads(threads)
