from __future__ import annotations

import pytest
import torch

from dadet.data import DatasetSpec, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(
        num_classes=3,
        image_size=64,
        samples_per_domain=12,
        shift_kind="fog_blend",
        shift_strength=0.6,
        rng_seed=7,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    """Small paired dataset shared by tests that only need real-looking samples."""
    return generate_dataset(tiny_spec)
