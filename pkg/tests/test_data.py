from __future__ import annotations

import numpy as np
import pytest

from dadet.boxes import iou
from dadet.data import (
    DatasetSpec,
    Domain,
    apply_domain_shift,
    generate_dataset,
    image_label_vector,
    load_dataset,
    save_dataset,
)
from dadet.errors import ConfigurationError, DataError


def test_spec_validation_names_field():
    with pytest.raises(ConfigurationError, match="num_classes"):
        DatasetSpec(num_classes=1).validate()
    with pytest.raises(ConfigurationError, match="num_classes"):
        DatasetSpec(num_classes=7).validate()
    with pytest.raises(ConfigurationError, match="image_size"):
        DatasetSpec(image_size=16).validate()
    with pytest.raises(ConfigurationError, match="shift_strength"):
        DatasetSpec(shift_strength=1.5).validate()
    with pytest.raises(ConfigurationError, match="shift_kind"):
        DatasetSpec(shift_kind="gaussian_blur").validate()
    with pytest.raises(ConfigurationError, match="samples_per_domain"):
        DatasetSpec(samples_per_domain=0).validate()


def test_generation_is_deterministic(tiny_spec):
    s1, t1 = generate_dataset(tiny_spec)
    s2, t2 = generate_dataset(tiny_spec)
    for a, b in zip(s1 + t1, s2 + t2):
        assert np.array_equal(a.image, b.image)
        assert a.eval_instances == b.eval_instances


def test_seed_changes_content(tiny_spec):
    import dataclasses

    s1, _ = generate_dataset(tiny_spec)
    s2, _ = generate_dataset(dataclasses.replace(tiny_spec, rng_seed=tiny_spec.rng_seed + 1))
    assert not np.array_equal(s1[0].image, s2[0].image)


def test_samples_well_formed(tiny_dataset, tiny_spec):
    source, target = tiny_dataset
    size = tiny_spec.image_size
    for sample in source + target:
        assert sample.image.shape == (size, size, 3)
        assert sample.image.dtype == np.float32
        assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0
        instances = sample.eval_instances
        assert 1 <= len(instances) <= 5
        for inst in instances:
            assert 0 <= inst.class_id < tiny_spec.num_classes
            assert 0 <= inst.box.x_min < inst.box.x_max <= size
            assert 0 <= inst.box.y_min < inst.box.y_max <= size
        # instances within one image overlap at most weakly
        for i in range(len(instances)):
            for j in range(i + 1, len(instances)):
                assert iou(instances[i].box, instances[j].box) <= 0.3 + 1e-9


def test_labels_match_instances(tiny_dataset, tiny_spec):
    source, target = tiny_dataset
    for sample in source + target:
        expected = image_label_vector(sample.eval_instances, tiny_spec.num_classes)
        assert np.array_equal(sample.eval_image_labels, expected)


def test_every_class_occurs(tiny_dataset, tiny_spec):
    source, target = tiny_dataset
    for split in (source, target):
        present = {inst.class_id for s in split for inst in s.eval_instances}
        assert present == set(range(tiny_spec.num_classes))


def test_image_label_vector():
    from dadet.boxes import BoundingBox
    from dadet.data import Instance

    box = BoundingBox(0, 0, 5, 5)
    vec = image_label_vector([Instance(box, 0), Instance(box, 2), Instance(box, 0)], 4)
    assert vec.tolist() == [1, 0, 1, 0]
    with pytest.raises(DataError):
        image_label_vector([Instance(box, 4)], 4)


def test_guard_counts_only_target_training_reads(tiny_dataset):
    source, target = tiny_dataset
    guard = source[0].guard
    start = guard.target_reads
    _ = source[0].instances
    _ = source[0].image_labels
    _ = target[0].eval_instances
    _ = target[0].eval_image_labels
    assert guard.target_reads == start
    _ = target[0].instances
    assert guard.target_reads == start + 1
    _ = target[0].image_labels
    assert guard.target_reads == start + 2


def test_shift_identity_at_zero_strength():
    rng = np.random.default_rng(5)
    image = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    for kind in ("fog_blend", "color_shift", "texture_noise"):
        out = apply_domain_shift(image, kind, 0.0)
        assert np.allclose(out, image, atol=1e-7)


def test_shift_monotone_in_strength():
    rng = np.random.default_rng(6)
    image = rng.uniform(size=(16, 16, 3)).astype(np.float32)
    for kind in ("fog_blend", "color_shift", "texture_noise"):
        gaps = [np.linalg.norm(apply_domain_shift(image, kind, s) - image) for s in (0.2, 0.5, 0.9)]
        assert gaps[0] <= gaps[1] <= gaps[2]


def test_fog_blend_closed_form():
    image = np.zeros((4, 4, 3), dtype=np.float32)
    out = apply_domain_shift(image, "fog_blend", 0.5)
    assert np.allclose(out, 0.5 * 0.8)


def test_shift_rejects_bad_inputs():
    image = np.zeros((4, 4, 3), dtype=np.float32)
    with pytest.raises(ConfigurationError):
        apply_domain_shift(image, "fog_blend", 1.5)
    with pytest.raises(ConfigurationError):
        apply_domain_shift(image, "vortex", 0.5)


def test_target_images_are_shifted(tiny_dataset):
    source, target = tiny_dataset
    # same index in both domains renders different scenes AND the fog pulls the
    # target pixel distribution toward the fog color
    fog = np.array([0.8, 0.8, 0.8])
    src_gap = np.mean([np.abs(s.image - fog).mean() for s in source])
    tgt_gap = np.mean([np.abs(t.image - fog).mean() for t in target])
    assert tgt_gap < src_gap


def test_save_load_roundtrip(tmp_path, tiny_spec):
    source, target = generate_dataset(tiny_spec)
    save_dataset(source, target, tiny_spec, tmp_path)
    s2, t2, spec2 = load_dataset(tmp_path)
    assert spec2 == tiny_spec
    assert len(s2) == len(source) and len(t2) == len(target)
    for a, b in zip(source + target, s2 + t2):
        assert a.sample_id == b.sample_id
        assert a.domain == b.domain
        assert a.eval_instances == b.eval_instances
        # PNG quantization: images agree to within one 8-bit step
        assert np.abs(a.image - b.image).max() <= (1.0 / 255.0) + 1e-6


def test_load_missing_dir_raises(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope")
