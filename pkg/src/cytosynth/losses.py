"""Adversarial, reconstruction and gradient-penalty objectives."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import DomainError, StateError

DEFAULT_LAMBDA_REG = 0.01


@dataclass
class LossBreakdown:
    adv_d: float
    adv_g: float
    recon: float
    r1: float
    total_d: float

    def as_dict(self):
        return asdict(self)


def hinge_d(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def hinge_g(fake_logits: Tensor) -> Tensor:
    return -fake_logits.mean()


def recon_loss(decoded: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error between a decoder output and its processed real target."""
    if decoded.shape != target.shape:
        raise DomainError(f"shape mismatch: {tuple(decoded.shape)} vs {tuple(target.shape)}")
    return (decoded - target).abs().mean()


def gradient_penalty(logits: Tensor, inputs: Tensor) -> Tensor:
    """Batch mean of ``||d(sum of logits per sample)/d inputs||^2``.

    ``logits`` must have been computed from ``inputs`` with ``inputs.requires_grad``.
    """
    if not logits.requires_grad:
        raise StateError("logits do not depend differentiably on the inputs")
    scores = logits.reshape(logits.shape[0], -1).sum(dim=1)
    (grad,) = torch.autograd.grad(scores.sum(), inputs, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros((), dtype=inputs.dtype)
    return grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1).mean()


def r1_penalty(d_fn: Callable[[Tensor, Tensor], Tensor], real_images: Tensor, labels: Tensor) -> Tensor:
    """R1 penalty of ``d_fn`` at the real images."""
    x = real_images.detach().requires_grad_(True)
    logits = d_fn(x, labels)
    if not isinstance(logits, Tensor):
        raise StateError(f"discriminator returned {type(logits).__name__}, not a differentiable tensor")
    if not logits.requires_grad:
        # constant discriminator: zero gradient everywhere
        return torch.zeros((), dtype=real_images.dtype)
    return gradient_penalty(logits, x)


def total_d_loss(adv_d, recon, r1, lambda_reg: float = DEFAULT_LAMBDA_REG):
    if lambda_reg < 0:
        raise DomainError("lambda_reg must be non-negative")
    return adv_d + recon + lambda_reg * r1
