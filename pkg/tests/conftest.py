"""Shared fixtures for the workbench test suite."""

from pathlib import Path

import numpy as np
import pytest

from app.core.graph import ModelGraph
from app.core.images import ImageTensor
from app.core.synthetic import write_mini_dataset


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same data."""
    return np.random.default_rng(42)


@pytest.fixture
def byte_image(rng):
    """Factory for random byte-convention images of shape (C, H, W)."""

    def make(height: int = 16, width: int = 16, channels: int = 3) -> ImageTensor:
        data = rng.integers(0, 256, size=(channels, height, width)).astype(np.float64)
        return ImageTensor(data=data, convention="byte")

    return make


@pytest.fixture
def graph64():
    """Factory building a float64 graph with seeded parameters."""

    def make(input_shape, layers, seed: int = 0) -> ModelGraph:
        graph = ModelGraph("test", input_shape, layers)
        graph.init_params(seed, dtype=np.float64)
        return graph

    return make


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory) -> Path:
    """Synthetic scenes, ship chips and detections plus their experiment.toml.

    Shared read-only across the session; tests that run stages write into
    their own output directories.
    """
    root = tmp_path_factory.mktemp("mini")
    return write_mini_dataset(root, seed=0)
