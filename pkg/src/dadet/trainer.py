"""Objective composition and the two-domain adversarial training loop.

Each iteration draws one labeled source image and one unlabeled target image.
The source image contributes the detection loss, the image-level classification
loss, and its share of the alignment terms; the target image contributes only
alignment terms (its annotations are never read). Every random choice comes from
a seeded stream, so a run is reproducible byte-for-byte from its config.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .alignment import PROB_EPS, consistency_loss, image_align_loss, instance_align_loss
from .ccr import InstanceWeight, assign_weights, weighted_instance_align
from .data import DatasetSpec, DetectionSample, Domain, image_label_vector
from .detector import BackboneFeatures
from .errors import ConfigurationError, ContractViolationError, TrainingDivergedError
from .evaluation import MapResult, map_score
from .icr import icr_loss
from .model import DomainAdaptiveDetector, build_model, load_checkpoint, save_checkpoint

MODES = ("source_only", "da_faster", "da_faster_icr", "da_faster_icr_ccr", "sw_structure")
ADAPTIVE_MODES = MODES[1:]
ICR_MODES = ("da_faster_icr", "da_faster_icr_ccr", "sw_structure")
CCR_MODES = ("da_faster_icr_ccr", "sw_structure")

# contract for injected auxiliary alignment terms (sw_structure mode)
AlignmentTerm = Callable[[BackboneFeatures, Domain], torch.Tensor]


@dataclass
class RunConfig:
    """Training-run settings; the `lambda` key in config files maps to lambda_weight."""

    mode: str = "da_faster_icr_ccr"
    lambda_weight: float = 0.1
    lambda_prime: float = 1.0
    iters_phase1: int = 1500
    iters_phase2: int = 500
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    # consistency weights switch on at this iteration; before it the instance loss
    # uses unit weights, so the weights only act once the image-level head that
    # produces them has had time to calibrate
    ccr_from_iteration: int = 1600

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ADAPTIVE_MODES and not self.lambda_weight > 0:
            raise ConfigurationError("lambda must be > 0 for adaptive modes")
        for name in ("lr_phase1", "lr_phase2"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        for name in ("iters_phase1", "iters_phase2", "checkpoint_interval", "seed",
                     "ccr_from_iteration"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.iters_phase1 + self.iters_phase2


_TERMS = ("l_det", "l_icr", "l_img", "l_ins", "l_cst", "l_global", "l_local")


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


@dataclass
class LossBundle:
    """Named loss terms; a term left as None is absent (logged as 0 with flag False)."""

    l_det: Any = None
    l_icr: Any = None
    l_img: Any = None
    l_ins: Any = None
    l_cst: Any = None
    l_global: Any = None
    l_local: Any = None

    def present(self, name: str) -> bool:
        return getattr(self, name) is not None

    def as_floats(self) -> dict[str, float]:
        return {
            name: _scalar(getattr(self, name)) if self.present(name) else 0.0
            for name in _TERMS
        }

    def cast_double(self) -> "LossBundle":
        """Terms widened to float64 so the composed total matches a float64 recompute
        of the logged parts exactly (the parts themselves are logged losslessly)."""
        widened = {}
        for name in _TERMS:
            value = getattr(self, name)
            widened[name] = value.double() if isinstance(value, torch.Tensor) else value
        return LossBundle(**widened)


def _require(parts: LossBundle, name: str, mode: str):
    value = getattr(parts, name)
    if value is None:
        raise ContractViolationError(f"mode {mode!r} requires loss term {name!r}")
    return value


def compose_objective(parts: LossBundle, config: RunConfig):
    """Combine loss terms into the mode's training objective.

    Works on tensors during training and on plain floats when re-checking logs.
    """
    mode = config.mode
    l_det = _require(parts, "l_det", mode)
    if mode == "source_only":
        return l_det
    if mode == "da_faster":
        adapt = sum(_require(parts, n, mode) for n in ("l_img", "l_ins", "l_cst"))
        return l_det + config.lambda_weight * adapt
    if mode in ("da_faster_icr", "da_faster_icr_ccr"):
        l_icr = _require(parts, "l_icr", mode)
        adapt = sum(_require(parts, n, mode) for n in ("l_img", "l_ins", "l_cst"))
        return l_det + l_icr + config.lambda_weight * adapt
    if mode == "sw_structure":
        l_icr = _require(parts, "l_icr", mode)
        adapt = sum(_require(parts, n, mode) for n in ("l_ins", "l_global", "l_local"))
        return l_det + l_icr + config.lambda_prime * adapt
    raise ConfigurationError(f"unknown mode {mode!r}")


class _EpochShuffler:
    """Cyclic index stream; each epoch reshuffles with a seed derived from (seed, tag, epoch)."""

    def __init__(self, count: int, seed: int, tag: int):
        self.count = count
        self.seed = seed
        self.tag = tag
        self.epoch = -1
        self.pos = 0
        self.order = np.zeros(0, dtype=np.int64)

    def next(self) -> int:
        if self.pos >= len(self.order):
            self.epoch += 1
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, 11, self.tag, self.epoch)))
            self.order = rng.permutation(self.count)
            self.pos = 0
        idx = int(self.order[self.pos])
        self.pos += 1
        return idx


def default_global_loss(model: DomainAdaptiveDetector, features: BackboneFeatures, domain: Domain) -> torch.Tensor:
    """Focal-style weak domain loss on globally pooled backbone features."""
    pooled = features.feature_map.mean(dim=(1, 2))
    p = torch.sigmoid(model.sw_global_head(model.grl_image(pooled))).clamp(PROB_EPS, 1 - PROB_EPS)
    d = float(domain.value)
    p_true = d * p + (1.0 - d) * (1.0 - p)
    return (-((1.0 - p_true) ** 2) * torch.log(p_true)).reshape(())


def default_local_loss(model: DomainAdaptiveDetector, features: BackboneFeatures, domain: Domain) -> torch.Tensor:
    """Per-location least-squares domain loss on the stride-4 intermediate map."""
    if features.mid_map is None:
        raise ContractViolationError("local alignment needs backbone_forward(..., with_mid=True)")
    x = model.grl_image(features.mid_map).unsqueeze(0)
    p = torch.sigmoid(model.sw_local_head(x)).reshape(-1)
    return ((p - float(domain.value)) ** 2).mean()


def _summarize_weights(weights: list[InstanceWeight]) -> dict[str, float]:
    values = [w.weight for w in weights]
    fg = sum(1 for w in weights if w.chosen_class is not None)
    if not values:
        return {"min": 1.0, "mean": 1.0, "max": 1.0, "fg_fraction": 0.0}
    return {
        "min": min(values),
        "mean": sum(values) / len(values),
        "max": max(values),
        "fg_fraction": fg / len(values),
    }


class Trainer:
    """Runs one configured training run and writes metrics + checkpoints to out_dir."""

    def __init__(
        self,
        config: RunConfig,
        dataset_spec: DatasetSpec,
        source: list[DetectionSample],
        target: list[DetectionSample],
        out_dir: str | Path,
        global_loss_fn: AlignmentTerm | None = None,
        local_loss_fn: AlignmentTerm | None = None,
        zero_icr_term: bool = False,
        disable_ccr: bool = False,
    ):
        self.config = config
        self.dataset_spec = dataset_spec
        self.source = source
        self.target = target
        self.out_dir = Path(out_dir)
        self.zero_icr_term = zero_icr_term
        self.disable_ccr = disable_ccr
        self.model = build_model(dataset_spec.num_classes, dataset_spec.image_size, config.seed)
        self._global_loss = global_loss_fn or (lambda f, d: default_global_loss(self.model, f, d))
        self._local_loss = local_loss_fn or (lambda f, d: default_local_loss(self.model, f, d))
        self._sampler = np.random.default_rng(np.random.SeedSequence((config.seed, 23)))

    # --- loss assembly -----------------------------------------------------

    def _iteration_losses(
        self, src: DetectionSample, tgt: DetectionSample | None, iteration: int = 0
    ) -> tuple[LossBundle, dict[str, float] | None]:
        mode = self.config.mode
        model = self.model
        det = model.detector
        with_mid = mode == "sw_structure"

        f_s = det.backbone_forward(src.image, with_mid=with_mid)
        l_det, _, roi_s = det.detection_loss(f_s, src, self._sampler)
        bundle = LossBundle(l_det=l_det)
        d_stats: dict[str, float] | None = None
        if mode == "source_only":
            return bundle, None

        assert tgt is not None
        f_t = det.backbone_forward(tgt.image, with_mid=with_mid)
        props_t = det.rpn_propose(f_t)
        det.fill_roi_outputs(f_t, props_t)

        probs_s = model.instance_domain_classifier(model.grl_instance(roi_s.roi_features))
        probs_t = model.instance_domain_classifier(model.grl_instance(props_t.roi_features))

        ccr_active = (
            mode in CCR_MODES
            and not self.disable_ccr
            and iteration >= self.config.ccr_from_iteration
        )
        if ccr_active:
            icr_t = model.icr_head.predict_detached(f_t.feature_map)
            weights_t = assign_weights(props_t, icr_t.probs, Domain.TARGET)
            d_stats = _summarize_weights(weights_t)
            bundle.l_ins = instance_align_loss(probs_s, Domain.SOURCE) + weighted_instance_align(
                probs_t, Domain.TARGET, weights_t
            )
        else:
            bundle.l_ins = instance_align_loss(probs_s, Domain.SOURCE) + instance_align_loss(
                probs_t, Domain.TARGET
            )

        if mode == "sw_structure":
            bundle.l_global = self._global_loss(f_s, Domain.SOURCE) + self._global_loss(
                f_t, Domain.TARGET
            )
            bundle.l_local = self._local_loss(f_s, Domain.SOURCE) + self._local_loss(
                f_t, Domain.TARGET
            )
        else:
            map_s = model.image_domain_classifier(model.grl_image(f_s.feature_map))
            map_t = model.image_domain_classifier(model.grl_image(f_t.feature_map))
            bundle.l_img = image_align_loss(map_s, Domain.SOURCE) + image_align_loss(
                map_t, Domain.TARGET
            )
            bundle.l_cst = consistency_loss(map_s, probs_s) + consistency_loss(map_t, probs_t)

        if mode in ICR_MODES:
            if self.zero_icr_term:
                bundle.l_icr = torch.zeros(())
            else:
                pred = model.icr_head(f_s.feature_map, Domain.SOURCE)
                labels = image_label_vector(src.instances, self.dataset_spec.num_classes)
                bundle.l_icr = icr_loss(pred, labels, Domain.SOURCE)
        return bundle, d_stats

    # --- the loop -----------------------------------------------------------

    def train(self) -> list[dict[str, Any]]:
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.model.train()
        optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=cfg.lr_phase1,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
        )
        src_stream = _EpochShuffler(len(self.source), cfg.seed, Domain.SOURCE.value)
        tgt_stream = _EpochShuffler(len(self.target), cfg.seed, Domain.TARGET.value)
        adaptive = cfg.mode != "source_only"

        records: list[dict[str, Any]] = []
        with open(self.out_dir / "metrics.jsonl", "w") as log:
            for it in range(cfg.total_iters):
                lr = cfg.lr_phase1 if it < cfg.iters_phase1 else cfg.lr_phase2
                for group in optimizer.param_groups:
                    group["lr"] = lr
                src = self.source[src_stream.next()]
                tgt = self.target[tgt_stream.next()] if adaptive else None

                bundle, d_stats = self._iteration_losses(src, tgt, it)
                total = compose_objective(bundle.cast_double(), cfg)
                self._check_finite(bundle, total, it)

                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                record: dict[str, Any] = {"iter": it, "lr": lr}
                record.update(
                    {k: v for k, v in bundle.as_floats().items() if k in _LOG_TERMS}
                )
                record["total"] = _scalar(total)
                record["d_stats"] = d_stats
                if cfg.mode == "sw_structure":
                    floats = bundle.as_floats()
                    record["l_global"] = floats["l_global"]
                    record["l_local"] = floats["l_local"]
                records.append(record)
                log.write(json.dumps(record) + "\n")

                if cfg.checkpoint_interval > 0 and (it + 1) % cfg.checkpoint_interval == 0:
                    self._save(optimizer, it + 1, f"checkpoint_{it + 1:06d}.pt")
        self._save(optimizer, cfg.total_iters, "checkpoint.pt")
        return records

    def _check_finite(self, bundle: LossBundle, total, iteration: int) -> None:
        for name in _TERMS:
            if bundle.present(name) and not math.isfinite(_scalar(getattr(bundle, name))):
                raise TrainingDivergedError(
                    f"loss term {name} became non-finite at iteration {iteration}"
                )
        if not math.isfinite(_scalar(total)):
            raise TrainingDivergedError(f"total loss became non-finite at iteration {iteration}")

    def _save(self, optimizer: torch.optim.SGD, iteration: int, name: str) -> None:
        save_checkpoint(
            self.model,
            self.out_dir / name,
            iteration=iteration,
            extra={"optimizer": optimizer.state_dict(), "run_config": asdict(self.config)},
        )


_LOG_TERMS = ("l_det", "l_icr", "l_img", "l_ins", "l_cst")


def train(
    config: RunConfig,
    dataset_spec: DatasetSpec,
    source: list[DetectionSample],
    target: list[DetectionSample],
    out_dir: str | Path,
    **kwargs: Any,
) -> tuple[DomainAdaptiveDetector, list[dict[str, Any]]]:
    """Convenience wrapper: build a Trainer, run it, return (model, metrics records)."""
    trainer = Trainer(config, dataset_spec, source, target, out_dir, **kwargs)
    records = trainer.train()
    return trainer.model, records


def evaluate_checkpoint(
    checkpoint: str | Path | DomainAdaptiveDetector,
    samples: list[DetectionSample],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> MapResult:
    """mAP of a trained model over a sample list (annotations read via eval accessors)."""
    if isinstance(checkpoint, DomainAdaptiveDetector):
        model = checkpoint
    else:
        model, _ = load_checkpoint(checkpoint)
    if model.num_classes != num_classes:
        raise ContractViolationError(
            f"checkpoint has {model.num_classes} classes, dataset has {num_classes}"
        )
    model.eval()
    detections = [model.detector.detect(s.image) for s in samples]
    ground_truth = [s.eval_instances for s in samples]
    return map_score(detections, ground_truth, iou_threshold)
