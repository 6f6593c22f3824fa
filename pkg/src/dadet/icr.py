"""Image-level categorical regularization: a multi-label classifier on globally pooled
backbone features, trained only on source images. The same 1x1 classifier applied
before pooling yields per-class evidence maps (weak localization readout).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import DetectionSample, Domain
from .errors import ContractViolationError

PROB_EPS = 1e-7


@dataclass
class ImageLevelPrediction:
    logits: torch.Tensor  # (C,)
    probs: torch.Tensor  # (C,), sigmoid of logits clamped away from {0, 1}


class IcrHead(nn.Module):
    """Global average pooling followed by a 1x1 convolution, one logit per class.

    `target_grad_forwards` counts gradient-enabled forward calls on target-domain
    features; it must stay zero over a training run (target images may only be scored
    through `predict_detached`).
    """

    def __init__(self, in_channels: int, num_classes: int, hidden_channels: int = 0):
        super().__init__()
        if hidden_channels > 0:
            self.classifier = nn.Sequential(
                nn.Conv2d(in_channels, hidden_channels, kernel_size=1),
                nn.ReLU(),
                nn.Conv2d(hidden_channels, num_classes, kernel_size=1),
            )
            final = self.classifier[-1]
        else:
            self.classifier = nn.Conv2d(in_channels, num_classes, kernel_size=1)
            final = self.classifier
        # the output layer starts at zero: logits are 0 (probs 0.5) and no gradient
        # reaches the shared features until the head has fit the label statistics
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        self.num_classes = num_classes
        self.target_grad_forwards = 0

    def forward(self, features: torch.Tensor, domain: Domain = Domain.SOURCE) -> ImageLevelPrediction:
        if domain is Domain.TARGET and torch.is_grad_enabled():
            self.target_grad_forwards += 1
        if features.dim() == 3:
            features = features.unsqueeze(0)
        pooled = features.mean(dim=(2, 3), keepdim=True)
        logits = self.classifier(pooled).reshape(-1)
        probs = torch.sigmoid(logits).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return ImageLevelPrediction(logits=logits, probs=probs)

    def predict_detached(self, features: torch.Tensor) -> ImageLevelPrediction:
        """Gradient-free scoring, safe on either domain (used by CCR on target images)."""
        with torch.no_grad():
            pred = self.forward(features.detach(), domain=Domain.SOURCE)
        return ImageLevelPrediction(logits=pred.logits.detach(), probs=pred.probs.detach())

    def evidence_maps(self, features: torch.Tensor) -> torch.Tensor:
        """Per-location classifier response before pooling: (C, h, w) logits."""
        with torch.no_grad():
            if features.dim() == 3:
                features = features.unsqueeze(0)
            return self.classifier(features).squeeze(0)


def icr_loss(
    prediction: ImageLevelPrediction,
    image_labels: np.ndarray | torch.Tensor,
    domain: Domain = Domain.SOURCE,
) -> torch.Tensor:
    """Multi-label binary cross-entropy summed over classes; source supervision only."""
    if domain is Domain.TARGET:
        raise ContractViolationError("icr_loss is defined on source samples only")
    y = torch.as_tensor(np.asarray(image_labels), dtype=torch.float32)
    p = prediction.probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    if y.shape != p.shape:
        raise ContractViolationError(f"label vector shape {tuple(y.shape)} != {tuple(p.shape)}")
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()


def normalized_heatmaps(evidence: torch.Tensor) -> np.ndarray:
    """Min-max normalize each class evidence map to [0, 1] for grayscale export."""
    maps = evidence.detach().cpu().numpy().astype(np.float64)
    out = np.zeros_like(maps)
    for c in range(maps.shape[0]):
        lo, hi = maps[c].min(), maps[c].max()
        if hi > lo:
            out[c] = (maps[c] - lo) / (hi - lo)
    return out


def evidence_peak_hits(
    evidence: torch.Tensor,
    sample: DetectionSample,
    stride: int,
    same_class: bool = True,
) -> bool:
    """True when every present class's evidence peak lands inside a ground-truth box.

    With same_class=True the peak of class c must fall inside a box of class c; with
    False, inside any present class's box. Peaks are located at feature-cell centers.
    """
    instances = sample.instances if sample.domain is Domain.SOURCE else sample.eval_instances
    present = sorted({inst.class_id for inst in instances})
    if not present:
        return False
    maps = evidence.detach().cpu().numpy()
    for c in present:
        flat_idx = int(np.argmax(maps[c]))
        v, u = divmod(flat_idx, maps.shape[2])
        x = (u + 0.5) * stride
        y = (v + 0.5) * stride
        candidates = [
            inst.box
            for inst in instances
            if (inst.class_id == c if same_class else inst.class_id in present)
        ]
        inside = any(
            box.x_min <= x <= box.x_max and box.y_min <= y <= box.y_max for box in candidates
        )
        if not inside:
            return False
    return True
