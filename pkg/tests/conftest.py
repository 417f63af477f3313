from __future__ import annotations

import numpy as np
import pytest

from deepid.convnet import NetworkConfig
from deepid.dataset import LabeledDataset, SyntheticSpec, generate_dataset

TINY_NETWORK = {
    "input": [1, 8, 8],
    "feature-dim": 8,
    "multi-scale": True,
    "layers": [
        {"name": "conv1", "kind": "conv", "kernel": [3, 3], "channels": 4},
        {"name": "pool1", "kind": "maxpool", "kernel": [2, 2], "stride": 2},
        {"name": "relu1", "kind": "relu"},
        {"name": "conv2", "kind": "conv", "kernel": [2, 2], "channels": 6},
        {"name": "relu2", "kind": "relu"},
    ],
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net() -> NetworkConfig:
    """Two convolutions, one pooling layer and an 8-dimensional DeepID2 layer."""
    return NetworkConfig.from_dict(TINY_NETWORK)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    return SyntheticSpec(identities=8, samples=6, height=8, width=8, shift=0.5, seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec: SyntheticSpec) -> LabeledDataset:
    return generate_dataset(tiny_spec)


def random_spd(rng: np.random.Generator, dim: int, floor: float = 0.1) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    return a @ a.T / dim + floor * np.eye(dim)
