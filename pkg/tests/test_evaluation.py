from __future__ import annotations

import itertools

import numpy as np
import pytest
import torch

from dadet.boxes import BoundingBox, iou
from dadet.data import DatasetSpec, Domain, Instance, generate_dataset
from dadet.errors import ContractViolationError, DataError
from dadet.evaluation import (
    FeatureSet,
    FeatureTag,
    emd_distance,
    export_features,
    extract_image_features,
    extract_instance_features,
    load_feature_matrix,
    load_tags,
    map_score,
    sample_balanced_instances,
    save_feature_matrix,
    save_tags,
)
from dadet.model import build_model


# --- brute-force oracles --------------------------------------------------------


def brute_force_ap(detections, gts, iou_threshold):
    """PR-curve enumeration for one class by explicit counting at every rank."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    matched = set()
    outcomes = []
    for i in order:
        img, box, _ = detections[i]
        candidates = [
            (iou(box, gt_box), (img, j))
            for j, (gt_img, gt_box) in enumerate(gts)
            if gt_img == img and (img, j) not in matched
        ]
        best = max(candidates, default=(0.0, None))
        if best[1] is not None and best[0] >= iou_threshold:
            matched.add(best[1])
            outcomes.append(True)
        else:
            outcomes.append(False)
    n_gt = len(gts)
    # walk every prefix, collect (recall, precision) points, integrate the envelope
    points = []
    tp = 0
    for rank, hit in enumerate(outcomes, start=1):
        tp += int(hit)
        points.append((tp / n_gt, tp / rank))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall == prev_recall:
            continue
        best_precision = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_precision
        prev_recall = recall
    return ap


def brute_force_emd(a, b):
    n = len(a)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(np.linalg.norm(a[i] - b[perm[i]]) for i in range(n))
        best = min(best, total / n)
    return best


# --- mAP -------------------------------------------------------------------------


def _box(x, y, w=10.0, h=10.0):
    return BoundingBox(x, y, x + w, y + h)


def test_map_perfect_detections():
    gts = [[Instance(_box(5, 5), 0), Instance(_box(30, 30), 1)]]
    dets = [[(_box(5, 5), 0, 1.0), (_box(30, 30), 1, 1.0)]]
    result = map_score(dets, gts)
    assert result.mean_ap == pytest.approx(1.0)
    assert result.per_class == {0: pytest.approx(1.0), 1: pytest.approx(1.0)}


def test_map_no_detections():
    gts = [[Instance(_box(5, 5), 0)]]
    result = map_score([[]], gts)
    assert result.mean_ap == 0.0


def test_map_three_detection_fixture():
    """Ranked (TP, FP, TP) against 2 GT: AP = 0.5*1.0 + 0.5*(2/3)."""
    gts = [[Instance(_box(0, 0), 0), Instance(_box(40, 40), 0)]]
    dets = [
        [
            (_box(0, 0), 0, 0.9),  # TP
            (_box(20, 20), 0, 0.8),  # FP (no overlap)
            (_box(40, 40), 0, 0.7),  # TP
        ]
    ]
    result = map_score(dets, gts)
    assert result.per_class[0] == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), abs=1e-4)


def test_map_each_gt_matches_once():
    gts = [[Instance(_box(0, 0), 0)]]
    dets = [[(_box(0, 0), 0, 0.9), (_box(1, 1), 0, 0.8)]]  # second is a duplicate
    result = map_score(dets, gts)
    # precision points: (1, 1.0), then duplicate counts as FP
    assert result.per_class[0] == pytest.approx(1.0)


def test_map_classes_without_gt_are_excluded():
    gts = [[Instance(_box(0, 0), 0)]]
    dets = [[(_box(0, 0), 0, 0.9), (_box(30, 30), 2, 0.9)]]  # class 2 has no GT
    result = map_score(dets, gts)
    assert set(result.per_class) == {0}
    assert result.mean_ap == pytest.approx(1.0)


def test_map_matches_brute_force_on_random_fixtures():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n_gt = int(rng.integers(1, 4))
        n_det = int(rng.integers(0, 6))
        gt_boxes = [_box(rng.uniform(0, 50), rng.uniform(0, 50)) for _ in range(n_gt)]
        gts = [[Instance(b, 0) for b in gt_boxes]]
        dets = [[]]
        raw = []
        for _ in range(n_det):
            if rng.uniform() < 0.6:  # jittered copy of a GT box
                src = gt_boxes[int(rng.integers(n_gt))]
                dx, dy = rng.uniform(-4, 4, size=2)
                box = BoundingBox(src.x_min + dx, src.y_min + dy, src.x_max + dx, src.y_max + dy)
            else:
                box = _box(rng.uniform(0, 50), rng.uniform(0, 50))
            score = float(rng.uniform())
            dets[0].append((box, 0, score))
            raw.append((0, box, score))
        result = map_score(dets, gts)
        if n_det == 0:
            assert result.per_class[0] == 0.0
            continue
        oracle = brute_force_ap(raw, [(0, b) for b in gt_boxes], 0.5)
        assert result.per_class[0] == pytest.approx(oracle, abs=1e-9)


# --- EMD ---------------------------------------------------------------------------


def test_emd_identical_sets_zero():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(6, 3))
    assert emd_distance(pts, pts.copy()) == pytest.approx(0.0, abs=1e-12)


def test_emd_singletons():
    assert emd_distance(np.array([[0.0]]), np.array([[1.0]])) == pytest.approx(1.0)


def test_emd_crossing_pairs():
    # {0, 2} vs {1, 3}: identity matching (1+1)/2 beats the crossing (3+1)/2
    a = np.array([[0.0], [2.0]])
    b = np.array([[1.0], [3.0]])
    assert emd_distance(a, b) == pytest.approx(1.0, abs=1e-12)


def test_emd_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        d = int(rng.integers(1, 4))
        a = rng.normal(size=(n, d))
        b = rng.normal(size=(n, d))
        assert emd_distance(a, b) == pytest.approx(brute_force_emd(a, b), abs=1e-12)


def test_emd_metric_axioms():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2))
        c = rng.normal(size=(n, 1))  # 1-D triples for the triangle inequality
        d1 = emd_distance(a, b)
        assert d1 >= 0.0
        assert d1 == pytest.approx(emd_distance(b, a), abs=1e-12)
        x = rng.normal(size=(n, 1))
        y = rng.normal(size=(n, 1))
        assert emd_distance(x, y) <= emd_distance(x, c) + emd_distance(c, y) + 1e-9


def test_emd_zero_iff_equal_multisets():
    a = np.array([[0.0], [1.0], [1.0]])
    b = np.array([[1.0], [0.0], [1.0]])  # same multiset, different order
    assert emd_distance(a, b) == pytest.approx(0.0, abs=1e-12)
    c = np.array([[1.0], [0.0], [1.5]])
    assert emd_distance(a, c) > 0.0


def test_emd_translation_sensitivity():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.normal(size=(1, 3))
        v = rng.normal(size=3)
        shifted = p + v
        assert emd_distance(p, shifted) == pytest.approx(np.linalg.norm(v), abs=1e-9)


def test_emd_count_mismatch():
    with pytest.raises(ContractViolationError, match="balanced"):
        emd_distance(np.zeros((3, 2)), np.zeros((4, 2)))


def test_emd_dimension_mismatch():
    with pytest.raises(ContractViolationError):
        emd_distance(np.zeros((3, 2)), np.zeros((3, 5)))


# --- balanced sampling -------------------------------------------------------------


def _dataset(seed=11, samples=30):
    spec = DatasetSpec(num_classes=3, samples_per_domain=samples, rng_seed=seed)
    return generate_dataset(spec) + (spec,)


def test_balanced_sampling_counts():
    source, target, _ = _dataset()
    refs = sample_balanced_instances(source, target, per_class_count=10, seed=0)
    by_key = {}
    for ref in refs:
        by_key.setdefault((ref.class_id, ref.domain), []).append(ref)
    for class_id in {r.class_id for r in refs}:
        n_src = len(by_key.get((class_id, Domain.SOURCE.value), []))
        n_tgt = len(by_key.get((class_id, Domain.TARGET.value), []))
        assert n_src == n_tgt
        assert n_src <= 5


def test_balanced_sampling_scarce_domain_rule():
    """When one domain has fewer instances than asked, both domains drop to that count."""
    source, target, _ = _dataset(seed=12, samples=40)
    # count availability per class, then ask for far more than exists
    refs = sample_balanced_instances(source, target, per_class_count=10_000, seed=0)
    avail = {}
    for domain_value, split in ((0, source), (1, target)):
        for s in split:
            for inst in s.eval_instances:
                avail[(domain_value, inst.class_id)] = avail.get((domain_value, inst.class_id), 0) + 1
    by_key = {}
    for ref in refs:
        by_key.setdefault((ref.domain, ref.class_id), 0)
        by_key[(ref.domain, ref.class_id)] += 1
    for class_id in {r.class_id for r in refs}:
        expected = min(avail[(0, class_id)], avail[(1, class_id)])
        assert by_key[(0, class_id)] == expected
        assert by_key[(1, class_id)] == expected


def test_balanced_sampling_deterministic():
    source, target, _ = _dataset()
    a = sample_balanced_instances(source, target, per_class_count=8, seed=3)
    b = sample_balanced_instances(source, target, per_class_count=8, seed=3)
    assert a == b
    c = sample_balanced_instances(source, target, per_class_count=8, seed=4)
    assert a != c


def test_balanced_sampling_never_counts_as_training_reads():
    source, target, _ = _dataset()
    guard = source[0].guard
    before = guard.target_reads
    sample_balanced_instances(source, target, per_class_count=6, seed=0)
    assert guard.target_reads == before


# --- feature extraction and files ----------------------------------------------------


def test_feature_set_validation():
    with pytest.raises(DataError):
        FeatureSet(np.zeros((0, 4)), [])
    with pytest.raises(DataError):
        FeatureSet(np.array([[np.nan, 1.0]]), [FeatureTag(0, -1, "x")])
    with pytest.raises(DataError):
        FeatureSet(np.zeros((2, 4)), [FeatureTag(0, -1, "x")])


def test_image_feature_rows_match_samples():
    source, target, spec = _dataset(seed=13, samples=6)
    model = build_model(spec.num_classes, spec.image_size, seed=0)
    fs = extract_image_features(model, source + target)
    assert fs.points.shape == (12, model.config.backbone_channels[-1])
    assert [t.sample_id for t in fs.tags] == [s.sample_id for s in source + target]
    # same inputs -> same rows under frozen weights
    fs2 = extract_image_features(model, source + target)
    assert np.array_equal(fs.points, fs2.points)


def test_instance_features_align_with_refs():
    source, target, spec = _dataset(seed=14, samples=8)
    model = build_model(spec.num_classes, spec.image_size, seed=0)
    refs = sample_balanced_instances(source, target, per_class_count=4, seed=0)
    fs = extract_instance_features(model, source, target, refs)
    assert fs.points.shape[0] == len(refs)
    for tag, ref in zip(fs.tags, refs):
        assert tag.domain == ref.domain
        assert tag.class_id == ref.class_id
    # rows are unit length: set distances compare directions, not magnitudes
    norms = np.linalg.norm(fs.points, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-6)


def test_feature_matrix_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(7, 9)).astype(np.float32)
    path = tmp_path / "feats.bin"
    save_feature_matrix(path, pts)
    loaded = load_feature_matrix(path)
    assert loaded.shape == (7, 9)
    assert np.allclose(loaded, pts, atol=1e-7)
    header = path.read_bytes().split(b"\n", 1)[0].decode()
    assert "rows=7" in header and "cols=9" in header and "dtype=float32" in header


def test_feature_matrix_truncation_detected(tmp_path):
    path = tmp_path / "feats.bin"
    save_feature_matrix(path, np.zeros((4, 4), dtype=np.float32))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_feature_matrix(path)


def test_tags_roundtrip(tmp_path):
    tags = [FeatureTag(0, -1, "source_0001"), FeatureTag(1, 2, "target_0003")]
    path = tmp_path / "tags.jsonl"
    save_tags(path, tags)
    assert load_tags(path) == tags


def test_export_features_files(tmp_path):
    source, target, spec = _dataset(seed=15, samples=5)
    model = build_model(spec.num_classes, spec.image_size, seed=0)
    paths = export_features(model, source, target, tmp_path, per_class_count=4, seed=0)
    image_points = load_feature_matrix(paths["image_features"])
    image_tags = load_tags(paths["image_tags"])
    assert image_points.shape[0] == len(source) + len(target)
    assert len(image_tags) == image_points.shape[0]
    instance_points = load_feature_matrix(paths["instance_features"])
    instance_tags = load_tags(paths["instance_tags"])
    assert instance_points.shape[0] == len(instance_tags)
    src_rows = sum(1 for t in instance_tags if t.domain == 0)
    assert src_rows * 2 == instance_points.shape[0]
