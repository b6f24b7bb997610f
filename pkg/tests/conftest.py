"""Shared fixtures: synthetic image trees and deterministic RNG streams."""

from __future__ import annotations

import numpy as np
import pytest

from patchbank.synthetic import generate_benchmark, write_separable_fixture


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0xA5A5)


@pytest.fixture(scope="session")
def separable_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("separable")
    write_separable_fixture(root, n_train=3, n_nominal=4, n_anomalous=4, size=112)
    return root / "separable"


@pytest.fixture(scope="session")
def plates_small_root(tmp_path_factory):
    """One small plates category: 3 train, 4 + 4 test images."""
    root = tmp_path_factory.mktemp("plates_small")
    generate_benchmark(root, categories=("plates",), n_train=3, n_nominal=4, n_anomalous=4)
    return root


@pytest.fixture(scope="session")
def benchmark_root(tmp_path_factory):
    """The full two-category acceptance benchmark (16 train, 20 + 20 test)."""
    root = tmp_path_factory.mktemp("benchmark")
    generate_benchmark(root)
    return root
