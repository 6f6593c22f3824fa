from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dadet.boxes import BoundingBox
from dadet.data import AnnotationGuard, DetectionSample, Domain, Instance
from dadet.errors import ContractViolationError
from dadet.icr import IcrHead, ImageLevelPrediction, evidence_peak_hits, icr_loss, normalized_heatmaps


def make_head(channels=8, classes=3, seed=0):
    torch.manual_seed(seed)
    return IcrHead(channels, classes)


def test_forward_shapes_and_range():
    head = make_head()
    features = torch.randn(8, 5, 5)
    pred = head(features, Domain.SOURCE)
    assert pred.logits.shape == (3,)
    assert pred.probs.shape == (3,)
    probs = pred.probs.detach()
    assert float(probs.min()) > 0.0 and float(probs.max()) < 1.0


def test_gap_then_classify_equals_classify_constant_map():
    # on a spatially constant map, pooling first or classifying first is the same
    head = make_head(seed=1)
    const = torch.randn(8, 1, 1).repeat(1, 6, 6)
    pred = head(const)
    evidence = head.evidence_maps(const)
    assert torch.allclose(evidence.mean(dim=(1, 2)), pred.logits, atol=1e-6)


def test_icr_loss_closed_form():
    # probs 0.5 everywhere: each class contributes -log(0.5)
    probs = torch.full((4,), 0.5)
    pred = ImageLevelPrediction(logits=torch.zeros(4), probs=probs)
    labels = np.array([1, 0, 1, 0])
    expected = 4 * -math.log(0.5)
    assert icr_loss(pred, labels).item() == pytest.approx(expected, abs=1e-6)


def test_icr_loss_sums_over_classes():
    rng = np.random.default_rng(0)
    for _ in range(30):
        c = int(rng.integers(2, 7))
        probs = torch.tensor(rng.uniform(0.05, 0.95, size=c))
        labels = rng.integers(0, 2, size=c)
        pred = ImageLevelPrediction(logits=torch.zeros(c), probs=probs)
        total = icr_loss(pred, labels).item()
        by_hand = -sum(
            math.log(p) if y else math.log(1.0 - p)
            for p, y in zip(probs.tolist(), labels.tolist())
        )
        assert total == pytest.approx(by_hand, abs=1e-6)


def test_icr_loss_refuses_target_domain():
    pred = ImageLevelPrediction(logits=torch.zeros(3), probs=torch.full((3,), 0.5))
    with pytest.raises(ContractViolationError):
        icr_loss(pred, np.array([1, 0, 0]), Domain.TARGET)


def test_icr_loss_shape_mismatch():
    pred = ImageLevelPrediction(logits=torch.zeros(3), probs=torch.full((3,), 0.5))
    with pytest.raises(ContractViolationError):
        icr_loss(pred, np.array([1, 0]))


def test_target_grad_forward_counter():
    head = make_head()
    features = torch.randn(8, 4, 4)
    head(features, Domain.SOURCE)
    assert head.target_grad_forwards == 0
    head.predict_detached(features)
    assert head.target_grad_forwards == 0
    with torch.no_grad():
        head(features, Domain.TARGET)
    assert head.target_grad_forwards == 0
    head(features, Domain.TARGET)
    assert head.target_grad_forwards == 1


def test_predict_detached_has_no_graph():
    head = make_head()
    features = torch.randn(8, 4, 4, requires_grad=True)
    pred = head.predict_detached(features)
    assert not pred.probs.requires_grad


def test_evidence_maps_shape():
    head = make_head()
    evidence = head.evidence_maps(torch.randn(8, 5, 7))
    assert evidence.shape == (3, 5, 7)


def test_normalized_heatmaps_range():
    rng = np.random.default_rng(1)
    evidence = torch.tensor(rng.normal(size=(3, 6, 6)))
    maps = normalized_heatmaps(evidence)
    for c in range(3):
        assert maps[c].min() == pytest.approx(0.0)
        assert maps[c].max() == pytest.approx(1.0)
    flat = normalized_heatmaps(torch.zeros(2, 4, 4))
    assert np.all(flat == 0.0)


def _sample_with_box(class_id, box, domain=Domain.SOURCE):
    guard = AnnotationGuard()
    image = np.zeros((64, 64, 3), dtype=np.float32)
    inst = Instance(box, class_id)
    labels = np.zeros(3, dtype=np.int64)
    labels[class_id] = 1
    return DetectionSample(image, [inst], domain, labels, "fixture_0000", guard)


def test_evidence_peak_hits_inside_and_outside():
    sample = _sample_with_box(1, BoundingBox(8, 8, 24, 24))
    evidence = torch.zeros(3, 8, 8)
    evidence[1, 2, 2] = 5.0  # cell center (20, 20) with stride 8 -> inside the box
    assert evidence_peak_hits(evidence, sample, stride=8)
    evidence[1, 2, 2] = 0.0
    evidence[1, 7, 7] = 5.0  # cell center (60, 60) -> outside
    assert not evidence_peak_hits(evidence, sample, stride=8)


def test_evidence_peak_requires_every_present_class():
    guard = AnnotationGuard()
    image = np.zeros((64, 64, 3), dtype=np.float32)
    instances = [
        Instance(BoundingBox(0, 0, 16, 16), 0),
        Instance(BoundingBox(40, 40, 60, 60), 2),
    ]
    labels = np.array([1, 0, 1])
    sample = DetectionSample(image, instances, Domain.SOURCE, labels, "fixture_0001", guard)
    evidence = torch.zeros(3, 8, 8)
    evidence[0, 1, 1] = 3.0  # (12, 12): inside the class-0 box
    evidence[2, 1, 1] = 3.0  # (12, 12): NOT inside the class-2 box
    assert not evidence_peak_hits(evidence, sample, stride=8)
    evidence[2, 1, 1] = 0.0
    evidence[2, 6, 6] = 3.0  # (52, 52): inside the class-2 box
    assert evidence_peak_hits(evidence, sample, stride=8)
