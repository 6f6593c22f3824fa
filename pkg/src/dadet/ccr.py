"""Category-conditioned reweighting of instance-level domain alignment.

Target proposals whose predicted foreground probability disagrees with the
image-level class probability get an exponentially larger alignment weight;
source proposals and predicted-background proposals keep weight 1. Weights are
computed from detached predictions and act as constants during backprop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch

from .alignment import instance_align_loss
from .data import Domain
from .errors import ContractViolationError


def ccr_weight(instance_prob: float, image_prob: float) -> float:
    """exp(|p - y|) for two probabilities; lies in [1, e]."""
    for name, v in (("instance_prob", instance_prob), ("image_prob", image_prob)):
        if not (0.0 <= v <= 1.0):
            raise ContractViolationError(f"{name}={v!r} is not a probability in [0, 1]")
    return math.exp(abs(instance_prob - image_prob))


@dataclass
class InstanceWeight:
    proposal_index: int
    chosen_class: int | None  # None for source or predicted-background proposals
    weight: float


def assign_weights(
    proposals: Any,
    image_probs: torch.Tensor | np.ndarray | None,
    domain: Domain,
) -> list[InstanceWeight]:
    """Per-proposal alignment weights for one image.

    Source images and predicted-background proposals get weight 1. A target
    proposal whose posterior argmax is a foreground class c gets
    exp(|posterior_c - image_prob_c|). Uses detached values only.
    """
    n = len(proposals)
    if domain is Domain.SOURCE:
        return [InstanceWeight(j, None, 1.0) for j in range(n)]
    if proposals.class_posteriors is None:
        raise ContractViolationError("proposals have no class posteriors; run the RoI head first")
    if image_probs is None:
        raise ContractViolationError("target reweighting requires image-level class probabilities")
    posteriors = proposals.class_posteriors.detach().cpu().numpy()
    if isinstance(image_probs, torch.Tensor):
        image_probs = image_probs.detach().cpu().numpy()
    image_probs = np.asarray(image_probs, dtype=np.float64).reshape(-1)
    num_fg = posteriors.shape[1] - 1
    if image_probs.shape[0] != num_fg:
        raise ContractViolationError(
            f"image_probs has {image_probs.shape[0]} classes, posteriors have {num_fg}"
        )
    out: list[InstanceWeight] = []
    for j in range(n):
        pred = int(posteriors[j].argmax())
        if pred == num_fg:  # background wins the argmax
            out.append(InstanceWeight(j, None, 1.0))
        else:
            w = ccr_weight(float(posteriors[j, pred]), float(image_probs[pred]))
            out.append(InstanceWeight(j, pred, w))
    return out


def weights_tensor(weights: list[InstanceWeight], like: torch.Tensor) -> torch.Tensor:
    return torch.tensor([w.weight for w in weights], dtype=like.dtype)


def weighted_instance_align(
    probs: torch.Tensor, domain: Domain, weights: list[InstanceWeight]
) -> torch.Tensor:
    """Instance alignment loss with per-proposal weights applied on the loss side."""
    if len(weights) != probs.shape[0]:
        raise ContractViolationError(
            f"{len(weights)} weights for {probs.shape[0]} proposals"
        )
    return instance_align_loss(probs, domain, weights=weights_tensor(weights, probs))


class _WeightedGradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, weights: torch.Tensor, lambda_weight: float) -> torch.Tensor:
        ctx.lambda_weight = lambda_weight
        ctx.save_for_backward(weights)
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (weights,) = ctx.saved_tensors
        shape = (-1,) + (1,) * (grad_output.dim() - 1)
        scaled = -ctx.lambda_weight * weights.view(shape) * grad_output
        return scaled, None, None


def weighted_grad_reverse(
    x: torch.Tensor, weights: torch.Tensor, lambda_weight: float = 1.0
) -> torch.Tensor:
    """Identity forward; backward multiplies row j's gradient by -lambda * weights[j].

    Moving the weights into the reversal layer this way leaves gradients reaching
    the features (and everything below them) identical to loss-side weighting.
    """
    if weights.shape[0] != x.shape[0]:
        raise ContractViolationError("one weight per row is required")
    return _WeightedGradReverse.apply(x, weights.detach(), lambda_weight)
