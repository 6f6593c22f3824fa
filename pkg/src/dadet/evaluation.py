"""Quantitative analysis tools: VOC-style mAP, assignment-based EMD between feature
point sets, balanced instance sampling, and feature export for external projection."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .boxes import BoundingBox, iou
from .data import DetectionSample, Domain, Instance
from .errors import ContractViolationError, DataError


# --- mean average precision -------------------------------------------------


@dataclass
class MapResult:
    per_class: dict[int, float]
    mean_ap: float


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the all-points interpolated precision-recall curve."""
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def map_score(
    detections: Sequence[Sequence[tuple[BoundingBox, int, float]]],
    ground_truth: Sequence[Sequence[Instance]],
    iou_threshold: float = 0.5,
) -> MapResult:
    """Per-class AP and their mean, over parallel per-image detection/GT lists.

    Detections are greedily matched in descending score order; each ground-truth box
    matches at most once. Classes with no ground truth are left out of the mean.
    """
    if len(detections) != len(ground_truth):
        raise ContractViolationError(
            f"{len(detections)} detection lists for {len(ground_truth)} ground-truth lists"
        )
    classes = sorted({inst.class_id for gts in ground_truth for inst in gts})
    per_class: dict[int, float] = {}
    for c in classes:
        gt_boxes = [[inst.box for inst in gts if inst.class_id == c] for gts in ground_truth]
        n_gt = sum(len(g) for g in gt_boxes)
        flat = [
            (img_idx, box, score)
            for img_idx, dets in enumerate(detections)
            for box, cls, score in dets
            if cls == c
        ]
        flat.sort(key=lambda d: -d[2])
        matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
        tp = np.zeros(len(flat))
        fp = np.zeros(len(flat))
        for i, (img_idx, box, _score) in enumerate(flat):
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(gt_boxes[img_idx]):
                if matched[img_idx][j]:
                    continue
                overlap = iou(box, gt_box)
                if overlap > best_iou:
                    best_iou, best_j = overlap, j
            if best_j >= 0 and best_iou >= iou_threshold:
                tp[i] = 1.0
                matched[img_idx][best_j] = True
            else:
                fp[i] = 1.0
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(fp)
        recalls = tp_cum / n_gt
        precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        per_class[c] = average_precision(recalls, precisions) if len(flat) else 0.0
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(per_class=per_class, mean_ap=mean_ap)


# --- feature sets and EMD -----------------------------------------------------


class FeatureTag(NamedTuple):
    domain: int
    class_id: int  # -1 for image-level rows
    sample_id: str


@dataclass
class FeatureSet:
    points: np.ndarray  # (N, d)
    tags: list[FeatureTag]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise DataError("a feature set needs at least one point (N x d matrix)")
        if np.isnan(self.points).any():
            raise DataError("feature set contains NaN entries")
        if len(self.tags) != self.points.shape[0]:
            raise DataError(
                f"{len(self.tags)} tags for {self.points.shape[0]} feature rows"
            )


def emd_distance(
    source_points: FeatureSet | np.ndarray, target_points: FeatureSet | np.ndarray
) -> float:
    """Minimum over perfect matchings of the mean Euclidean pair distance.

    Both sides must hold equally many points (use sample_balanced_instances to
    rebalance unequal per-class counts before calling).
    """
    a = source_points.points if isinstance(source_points, FeatureSet) else np.asarray(source_points, dtype=np.float64)
    b = target_points.points if isinstance(target_points, FeatureSet) else np.asarray(target_points, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[0] != b.shape[0]:
        raise ContractViolationError(
            f"point counts differ ({a.shape[0]} vs {b.shape[0]}); "
            "resample with balanced per-class counts"
        )
    if a.shape[1] != b.shape[1]:
        raise ContractViolationError(f"dimension mismatch ({a.shape[1]} vs {b.shape[1]})")
    if a.shape[0] == 0:
        raise ContractViolationError("feature sets are empty")
    cost = cdist(a, b, metric="euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


# --- balanced instance sampling ----------------------------------------------


class InstanceRef(NamedTuple):
    domain: int
    sample_index: int
    instance_index: int
    class_id: int


def sample_balanced_instances(
    source: list[DetectionSample],
    target: list[DetectionSample],
    per_class_count: int = 50,
    seed: int = 0,
) -> list[InstanceRef]:
    """Pick per_class_count ground-truth instances per class, half per domain.

    When one domain holds fewer than per_class_count/2 instances of a class, both
    domains contribute that smaller count so the selection stays balanced. Classes
    with no instances anywhere are skipped with a warning. Evaluation-only: target
    annotations are read through the eval accessors.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 31)))
    pools: dict[tuple[int, int], list[InstanceRef]] = {}
    classes: set[int] = set()
    for domain_value, samples in ((Domain.SOURCE.value, source), (Domain.TARGET.value, target)):
        for si, sample in enumerate(samples):
            for ii, inst in enumerate(sample.eval_instances):
                pools.setdefault((domain_value, inst.class_id), []).append(
                    InstanceRef(domain_value, si, ii, inst.class_id)
                )
                classes.add(inst.class_id)
    refs: list[InstanceRef] = []
    for c in sorted(classes):
        src_pool = pools.get((Domain.SOURCE.value, c), [])
        tgt_pool = pools.get((Domain.TARGET.value, c), [])
        if not src_pool and not tgt_pool:
            warnings.warn(f"class {c} absent from both domains; skipped")
            continue
        k = min(per_class_count // 2, len(src_pool), len(tgt_pool))
        for pool in (src_pool, tgt_pool):
            picked = rng.choice(len(pool), size=k, replace=False)
            refs.extend(pool[int(i)] for i in sorted(picked))
    return refs


# --- feature extraction and export -------------------------------------------


def extract_image_features(model, samples: list[DetectionSample]) -> FeatureSet:
    """One row per sample: global average pooling of the backbone output map."""
    rows, tags = [], []
    with torch.no_grad():
        for sample in samples:
            features = model.detector.backbone_forward(sample.image)
            rows.append(features.feature_map.mean(dim=(1, 2)).numpy())
            tags.append(FeatureTag(sample.domain.value, -1, sample.sample_id))
    return FeatureSet(np.stack(rows), tags)


def extract_instance_features(
    model,
    source: list[DetectionSample],
    target: list[DetectionSample],
    refs: list[InstanceRef],
) -> FeatureSet:
    """One row per reference: flattened RoI features pooled over the GT box, scaled
    to unit length so set distances compare feature directions rather than magnitudes."""
    from .detector import roi_extract  # local import to avoid a cycle at module load

    rows, tags = [], []
    by_domain = {Domain.SOURCE.value: source, Domain.TARGET.value: target}
    with torch.no_grad():
        for ref in refs:
            sample = by_domain[ref.domain][ref.sample_index]
            inst = sample.eval_instances[ref.instance_index]
            features = model.detector.backbone_forward(sample.image)
            pooled = roi_extract(features, [inst.box], model.config.roi_size)
            row = pooled.reshape(-1).numpy()
            norm = float(np.linalg.norm(row))
            rows.append(row / norm if norm > 0 else row)
            tags.append(FeatureTag(ref.domain, ref.class_id, sample.sample_id))
    return FeatureSet(np.stack(rows), tags)


def domain_distance(
    model,
    source: list[DetectionSample],
    target: list[DetectionSample],
    per_class_count: int = 50,
    seed: int = 0,
) -> float:
    """EMD between balanced source/target GT-instance features under one model."""
    refs = sample_balanced_instances(source, target, per_class_count, seed)
    if not refs:
        raise ContractViolationError("no instances available for domain distance")
    feats = extract_instance_features(model, source, target, refs)
    src_rows = np.array([t.domain == Domain.SOURCE.value for t in feats.tags])
    return emd_distance(feats.points[src_rows], feats.points[~src_rows])


def save_feature_matrix(path: str | Path, points: np.ndarray) -> None:
    """Plain binary matrix file with a one-line text header {rows, cols, dtype}."""
    arr = np.ascontiguousarray(points, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(f"rows={arr.shape[0]} cols={arr.shape[1]} dtype=float32\n".encode())
        fh.write(arr.tobytes())


def load_feature_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode().strip()
        fields = dict(part.split("=") for part in header.split())
        if fields.get("dtype") != "float32":
            raise DataError(f"unsupported feature dtype in {path}: {fields.get('dtype')}")
        rows, cols = int(fields["rows"]), int(fields["cols"])
        data = np.frombuffer(fh.read(), dtype=np.float32)
    if data.size != rows * cols:
        raise DataError(f"feature file {path} is truncated")
    return data.reshape(rows, cols).astype(np.float64)


def save_tags(path: str | Path, tags: list[FeatureTag]) -> None:
    with open(path, "w") as fh:
        for tag in tags:
            fh.write(
                json.dumps(
                    {"domain": tag.domain, "class_id": tag.class_id, "sample_id": tag.sample_id}
                )
                + "\n"
            )


def load_tags(path: str | Path) -> list[FeatureTag]:
    tags = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            tags.append(FeatureTag(rec["domain"], rec["class_id"], rec["sample_id"]))
    return tags


def export_features(
    model,
    source: list[DetectionSample],
    target: list[DetectionSample],
    out_dir: str | Path,
    per_class_count: int = 50,
    seed: int = 0,
) -> dict[str, Path]:
    """Write image-level and instance-level feature matrices plus tag manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = list(source) + list(target)
    image_fs = extract_image_features(model, samples)
    refs = sample_balanced_instances(source, target, per_class_count, seed)
    paths = {
        "image_features": out_dir / "image_features.bin",
        "image_tags": out_dir / "image_tags.jsonl",
    }
    save_feature_matrix(paths["image_features"], image_fs.points)
    save_tags(paths["image_tags"], image_fs.tags)
    if refs:
        instance_fs = extract_instance_features(model, source, target, refs)
        paths["instance_features"] = out_dir / "instance_features.bin"
        paths["instance_tags"] = out_dir / "instance_tags.jsonl"
        save_feature_matrix(paths["instance_features"], instance_fs.points)
        save_tags(paths["instance_tags"], instance_fs.tags)
    return paths
