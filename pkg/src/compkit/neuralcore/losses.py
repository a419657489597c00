import torch

from ..errors import ShapeMismatchError

__all__ = ["CE_EPS", "l1_loss", "mse_loss", "cross_entropy"]

CE_EPS = 1e-7


def _check_same_shape(what: str, a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatchError(what, [tuple(a.shape), tuple(b.shape)])


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _check_same_shape("l1 loss", pred, target)
    return (pred - target).abs().mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check_same_shape("mse loss", pred, target)
    return ((pred - target) ** 2).mean()


def cross_entropy(pred_prob: torch.Tensor, target_mask: torch.Tensor, eps: float = CE_EPS) -> torch.Tensor:
    """
    Binary cross-entropy between predicted probabilities and a (soft) target mask, averaged over all elements.
    Probabilities are clamped to [eps, 1 - eps].
    """
    _check_same_shape("cross entropy", pred_prob, target_mask)
    p = pred_prob.clamp(eps, 1.0 - eps)
    return -(target_mask * torch.log(p) + (1.0 - target_mask) * torch.log1p(-p)).mean()
