"""Adversarial domain alignment: gradient reversal, per-activation image-level and
per-proposal instance-level domain classifiers, and the image/instance consistency loss.

Alignment losses are literal sums over locations / proposals, not means; the trainer
logs the map size per step so the scale stays interpretable.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import Domain
from .errors import ContractViolationError

PROB_EPS = 1e-7


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_weight):
        ctx.lambda_weight = lambda_weight
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lambda_weight * grad_output, None


def grad_reverse(x: torch.Tensor, lambda_weight: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; backward emits -lambda_weight * upstream."""
    return _GradReverse.apply(x, lambda_weight)


class GradientReversal(nn.Module):
    def __init__(self, lambda_weight: float = 1.0):
        super().__init__()
        if lambda_weight < 0:
            raise ContractViolationError(f"lambda_weight must be >= 0, got {lambda_weight}")
        self.lambda_weight = lambda_weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grad_reverse(x, self.lambda_weight)


class ImageDomainClassifier(nn.Module):
    """Two 1x1 conv layers scoring every spatial activation of the backbone map."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, kernel_size=1),
        )
        # zero output layer: a fresh classifier predicts 0.5 everywhere, so the
        # reversed gradient stays silent until the discriminator has learned something
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(d, h, w) or (1, d, h, w) features -> (h, w) domain probabilities."""
        if features.dim() == 3:
            features = features.unsqueeze(0)
        logits = self.net(features)
        return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS).squeeze(0).squeeze(0)


class InstanceDomainClassifier(nn.Module):
    """Two-layer perceptron scoring flattened per-proposal RoI features."""

    def __init__(self, in_features: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_features, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )
        # same warm-up as the image-level classifier: start indifferent (p = 0.5)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, roi_features: torch.Tensor) -> torch.Tensor:
        """(N, F) flattened RoI features -> (N,) domain probabilities."""
        logits = self.net(roi_features).squeeze(-1)
        return torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)


@dataclass
class AlignmentOutputs:
    image_domain_map: torch.Tensor
    instance_domain_probs: torch.Tensor
    domain: Domain


def _domain_value(domain: Domain | int) -> float:
    return float(domain.value if isinstance(domain, Domain) else domain)


def image_align_loss(image_domain_map: torch.Tensor, domain: Domain | int) -> torch.Tensor:
    """Image-level alignment loss, summed over all map locations."""
    d = _domain_value(domain)
    p = image_domain_map.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(d * torch.log(p) + (1.0 - d) * torch.log(1.0 - p)).sum()


def instance_align_loss(
    instance_domain_probs: torch.Tensor,
    domain: Domain | int,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Instance-level alignment loss; per-proposal weights default to all ones."""
    probs = instance_domain_probs.reshape(-1)
    if weights is None:
        weights = torch.ones_like(probs)
    else:
        weights = torch.as_tensor(weights, dtype=probs.dtype).reshape(-1)
        if weights.shape[0] != probs.shape[0]:
            raise ContractViolationError(
                f"got {weights.shape[0]} weights for {probs.shape[0]} proposals"
            )
    if probs.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    d = _domain_value(domain)
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    per_proposal = -(d * torch.log(p) + (1.0 - d) * torch.log(1.0 - p))
    return (weights * per_proposal).sum()


def consistency_loss(
    image_domain_map: torch.Tensor, instance_domain_probs: torch.Tensor
) -> torch.Tensor:
    """Sum over proposals of |mean image-level probability - instance probability|."""
    probs = instance_domain_probs.reshape(-1)
    if probs.numel() == 0:
        return torch.zeros((), dtype=torch.float32)
    image_mean = image_domain_map.mean()
    return torch.abs(image_mean - probs).sum()
