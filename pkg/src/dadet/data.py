"""Synthetic paired-domain detection benchmark.

Source and target samples are drawn from one scene distribution (colored shapes on
plain or gradient backgrounds); target images additionally pass through a pixel-level
domain shift. Target annotations are kept for evaluation only and sit behind a read
guard so training code provably never touches them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .boxes import BoundingBox, iou
from .errors import ConfigurationError, DataError

FOG_COLOR = np.array([0.8, 0.8, 0.8], dtype=np.float32)
SHIFT_KINDS = ("fog_blend", "color_shift", "texture_noise")
_TEXTURE_NOISE_SEED = 202401

# class identity is carried by shape AND color so a tiny backbone can separate classes
_SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring")
_COLORS = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.85, 0.20],
        [0.20, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.90, 0.20, 0.85],
        [0.10, 0.85, 0.90],
    ],
    dtype=np.float32,
)

MAX_INSTANCES = 5
_MAX_OVERLAP_IOU = 0.3
_PLACEMENT_TRIES = 40


class Domain(Enum):
    SOURCE = 0
    TARGET = 1


class Instance(NamedTuple):
    box: BoundingBox
    class_id: int


@dataclass
class DatasetSpec:
    num_classes: int = 3
    image_size: int = 64
    samples_per_domain: int = 100
    shift_kind: str = "fog_blend"
    shift_strength: float = 0.6
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(_SHAPES):
            raise ConfigurationError(
                f"num_classes must be <= {len(_SHAPES)} (distinct shape classes), got {self.num_classes}"
            )
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be >= 32, got {self.image_size}")
        if self.samples_per_domain < 1:
            raise ConfigurationError(
                f"samples_per_domain must be >= 1, got {self.samples_per_domain}"
            )
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigurationError(
                f"shift_kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}"
            )
        if not 0.0 <= self.shift_strength <= 1.0:
            raise ConfigurationError(
                f"shift_strength must be in [0, 1], got {self.shift_strength}"
            )


class AnnotationGuard:
    """Counts reads of target-domain annotations through the training-facing accessors."""

    def __init__(self):
        self.target_reads = 0


class DetectionSample:
    """One image with its annotations and domain tag.

    `instances` / `image_labels` are the training-facing accessors: reading them on a
    target-domain sample increments the shared guard counter. Evaluation code must use
    `eval_instances` / `eval_image_labels` instead, which never count.
    """

    def __init__(
        self,
        image: np.ndarray,
        instances: Sequence[Instance],
        domain: Domain,
        image_labels: np.ndarray,
        sample_id: str,
        guard: AnnotationGuard,
    ):
        self.image = image
        self._instances = list(instances)
        self.domain = domain
        self._image_labels = image_labels
        self.sample_id = sample_id
        self.guard = guard

    @property
    def instances(self) -> list[Instance]:
        if self.domain is Domain.TARGET:
            self.guard.target_reads += 1
        return self._instances

    @property
    def image_labels(self) -> np.ndarray:
        if self.domain is Domain.TARGET:
            self.guard.target_reads += 1
        return self._image_labels

    @property
    def eval_instances(self) -> list[Instance]:
        return self._instances

    @property
    def eval_image_labels(self) -> np.ndarray:
        return self._image_labels


def image_label_vector(instances: Sequence[Instance], num_classes: int) -> np.ndarray:
    """Binary vector with a 1 for every class that occurs at least once."""
    labels = np.zeros(num_classes, dtype=np.int64)
    for inst in instances:
        if not 0 <= inst.class_id < num_classes:
            raise DataError(
                f"class_id {inst.class_id} out of range [0, {num_classes - 1}]"
            )
        labels[inst.class_id] = 1
    return labels


def apply_domain_shift(image: np.ndarray, kind: str, strength: float) -> np.ndarray:
    """Pixel-level shift, identity at strength 0 and monotone in strength under L2."""
    if not 0.0 <= strength <= 1.0:
        raise ConfigurationError(f"shift strength must be in [0, 1], got {strength}")
    image = np.asarray(image, dtype=np.float32)
    if kind == "fog_blend":
        return (1.0 - strength) * image + strength * FOG_COLOR
    if kind == "color_shift":
        rotated = image[..., [1, 2, 0]]
        return (1.0 - strength) * image + strength * rotated
    if kind == "texture_noise":
        rng = np.random.default_rng(_TEXTURE_NOISE_SEED)
        noise = rng.uniform(-1.0, 1.0, size=image.shape).astype(np.float32)
        return np.clip(image + strength * 0.25 * noise, 0.0, 1.0)
    raise ConfigurationError(f"unknown shift kind {kind!r}")


def _shape_mask(kind: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    xx = xx + 0.5 - cx
    yy = yy + 0.5 - cy
    if kind == "circle":
        return xx**2 + yy**2 <= half**2
    if kind == "square":
        return (np.abs(xx) <= half) & (np.abs(yy) <= half)
    if kind == "triangle":
        # upward triangle inscribed in the box
        inside_y = (yy >= -half) & (yy <= half)
        width_at_y = (yy + half) / 2.0
        return inside_y & (np.abs(xx) <= width_at_y)
    if kind == "cross":
        arm = half / 3.0
        in_box = (np.abs(xx) <= half) & (np.abs(yy) <= half)
        return in_box & ((np.abs(xx) <= arm) | (np.abs(yy) <= arm))
    if kind == "diamond":
        return np.abs(xx) + np.abs(yy) <= half
    if kind == "ring":
        dist2 = xx**2 + yy**2
        return (dist2 <= half**2) & (dist2 >= (0.55 * half) ** 2)
    raise DataError(f"unknown shape kind {kind!r}")


def _render_scene(
    rng: np.random.Generator, spec: DatasetSpec, forced_first_class: int
) -> tuple[np.ndarray, list[Instance]]:
    size = spec.image_size
    base = rng.uniform(0.10, 0.40)
    background = np.full((size, size, 3), base, dtype=np.float32)
    background += rng.uniform(-0.05, 0.05, size=3).astype(np.float32)
    if rng.uniform() < 0.5:
        slope = rng.uniform(-0.15, 0.15)
        ramp = np.linspace(-0.5, 0.5, size, dtype=np.float32) * slope
        if rng.uniform() < 0.5:
            background += ramp[:, None, None]
        else:
            background += ramp[None, :, None]
    image = np.clip(background, 0.0, 1.0)

    count = int(rng.integers(1, MAX_INSTANCES + 1))
    instances: list[Instance] = []
    for k in range(count):
        class_id = forced_first_class if k == 0 else int(rng.integers(spec.num_classes))
        placed = None
        for _ in range(_PLACEMENT_TRIES):
            extent = rng.uniform(0.18, 0.42) * size
            half = extent / 2.0
            cx = rng.uniform(half + 1.0, size - half - 1.0)
            cy = rng.uniform(half + 1.0, size - half - 1.0)
            box = BoundingBox(cx - half, cy - half, cx + half, cy + half)
            if all(iou(box, inst.box) <= _MAX_OVERLAP_IOU for inst in instances):
                placed = (cx, cy, half, box)
                break
        if placed is None:
            continue  # crowded scene, keep what fits (>= 1 always fits)
        cx, cy, half, box = placed
        color = _COLORS[class_id] + rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
        mask = _shape_mask(_SHAPES[class_id], size, cx, cy, half)
        image[mask] = np.clip(color, 0.0, 1.0)
        instances.append(Instance(box.clipped(size, size), class_id))
    return image, instances


def generate_dataset(
    spec: DatasetSpec,
) -> tuple[list[DetectionSample], list[DetectionSample]]:
    """Generate the paired benchmark: labeled source and shifted, guard-protected target.

    Per-sample RNG streams are derived from (rng_seed, domain, index), so output is
    deterministic and independent of any parallelization across samples. The first
    instance of sample i is forced to class i mod C, which keeps per-class counts
    balanced on small datasets.
    """
    spec.validate()
    guard = AnnotationGuard()
    splits: list[list[DetectionSample]] = []
    for domain in (Domain.SOURCE, Domain.TARGET):
        samples = []
        for i in range(spec.samples_per_domain):
            seq = np.random.SeedSequence((spec.rng_seed, domain.value, i))
            rng = np.random.default_rng(seq)
            image, instances = _render_scene(rng, spec, forced_first_class=i % spec.num_classes)
            if domain is Domain.TARGET:
                image = apply_domain_shift(image, spec.shift_kind, spec.shift_strength)
            samples.append(
                DetectionSample(
                    image=image,
                    instances=instances,
                    domain=domain,
                    image_labels=image_label_vector(instances, spec.num_classes),
                    sample_id=f"{domain.name.lower()}_{i:04d}",
                    guard=guard,
                )
            )
        splits.append(samples)
    return splits[0], splits[1]


def save_dataset(
    source: Sequence[DetectionSample],
    target: Sequence[DetectionSample],
    spec: DatasetSpec,
    out_dir: str | Path,
) -> None:
    """Write one PNG per sample plus a line-delimited annotation manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for sample in list(source) + list(target):
        rel_path = f"images/{sample.sample_id}.png"
        pixels = np.round(np.clip(sample.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(out / rel_path)
        records.append(
            {
                "id": sample.sample_id,
                "domain": sample.domain.name.lower(),
                "image_path": rel_path,
                "boxes": [list(inst.box.as_array()) for inst in sample.eval_instances],
                "classes": [inst.class_id for inst in sample.eval_instances],
            }
        )
    with open(out / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    with open(out / "dataset_spec.json", "w") as fh:
        json.dump(asdict(spec), fh, indent=2)


def load_dataset(
    data_dir: str | Path,
) -> tuple[list[DetectionSample], list[DetectionSample], DatasetSpec]:
    """Load a generated dataset directory; returns (source, target, spec) with a fresh guard."""
    root = Path(data_dir)
    spec_path = root / "dataset_spec.json"
    manifest_path = root / "manifest.jsonl"
    if not spec_path.exists() or not manifest_path.exists():
        raise DataError(f"{root} is not a dataset directory (missing manifest or spec)")
    with open(spec_path) as fh:
        spec = DatasetSpec(**json.load(fh))
    guard = AnnotationGuard()
    source: list[DetectionSample] = []
    target: list[DetectionSample] = []
    with open(manifest_path) as fh:
        for line in fh:
            rec = json.loads(line)
            image = (
                np.asarray(Image.open(root / rec["image_path"]).convert("RGB"), dtype=np.float32)
                / 255.0
            )
            domain = Domain.SOURCE if rec["domain"] == "source" else Domain.TARGET
            instances = [
                Instance(BoundingBox(*box), int(cls))
                for box, cls in zip(rec["boxes"], rec["classes"])
            ]
            sample = DetectionSample(
                image=image,
                instances=instances,
                domain=domain,
                image_labels=image_label_vector(instances, spec.num_classes),
                sample_id=rec["id"],
                guard=guard,
            )
            (source if domain is Domain.SOURCE else target).append(sample)
    return source, target, spec
