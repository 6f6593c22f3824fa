"""Composite model: detector plus the domain classifiers and image-level head.

Every training mode builds the full composite under the same seed so parameter
initialization is identical across modes; a mode differs only in which loss
terms it computes and applies.
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .alignment import GradientReversal, ImageDomainClassifier, InstanceDomainClassifier
from .detector import DetectorModel, ModelConfig
from .errors import CheckpointError
from .icr import IcrHead

CHECKPOINT_FORMAT_VERSION = 1


class DomainAdaptiveDetector(nn.Module):
    """Two-stage detector with image/instance domain classifiers and an
    image-level multi-label head attached to the backbone output."""

    def __init__(self, num_classes: int, image_size: int, config: ModelConfig | None = None):
        super().__init__()
        self.num_classes = num_classes
        self.image_size = image_size
        self.detector = DetectorModel(num_classes, image_size, config)
        cfg = self.detector.config
        d = self.detector.backbone.out_channels
        self.image_domain_classifier = ImageDomainClassifier(d, cfg.image_classifier_hidden)
        self.instance_domain_classifier = InstanceDomainClassifier(
            self.detector.roi_in_features, cfg.instance_classifier_hidden
        )
        self.icr_head = IcrHead(d, num_classes, cfg.icr_hidden_channels)
        # auxiliary global/local alignment heads (used only in sw_structure mode,
        # but always constructed so initialization draws are identical across modes)
        self.sw_global_head = nn.Linear(d, 1)
        self.sw_local_head = nn.Conv2d(cfg.backbone_channels[1], 1, 1)
        self.grl_image = GradientReversal(cfg.image_grl_coefficient)
        self.grl_instance = GradientReversal(cfg.instance_grl_coefficient)

    @property
    def config(self) -> ModelConfig:
        return self.detector.config


def build_model(
    num_classes: int,
    image_size: int,
    seed: int,
    config: ModelConfig | None = None,
) -> DomainAdaptiveDetector:
    """Construct the composite with deterministic parameter initialization."""
    torch.manual_seed(seed)
    return DomainAdaptiveDetector(num_classes, image_size, config)


def save_checkpoint(
    model: DomainAdaptiveDetector,
    path: str | Path,
    iteration: int = 0,
    extra: dict[str, Any] | None = None,
) -> None:
    """Write the model plus a self-describing header used to validate loads."""
    state = model.state_dict()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "num_classes": model.num_classes,
        "image_size": model.image_size,
        "model_config": asdict(model.config),
        "state_shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
        "iteration": iteration,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[DomainAdaptiveDetector, dict[str, Any]]:
    """Rebuild a model from a checkpoint, refusing on version or shape mismatch."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # unreadable / truncated file
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for key in ("format_version", "num_classes", "image_size", "model_config", "state_dict"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing header field {key!r}")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {payload['format_version']} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = ModelConfig(**payload["model_config"])
    model = DomainAdaptiveDetector(payload["num_classes"], payload["image_size"], config)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    stored = payload.get("state_shapes") or {
        k: list(v.shape) for k, v in payload["state_dict"].items()
    }
    if expected != stored:
        bad = next(
            k for k in sorted(set(expected) | set(stored)) if expected.get(k) != stored.get(k)
        )
        raise CheckpointError(f"checkpoint {path} does not match the model (first mismatch: {bad})")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
