"""Shared fixtures."""

from pathlib import Path

import numpy as np
import pytest

CONFIG_DIR = Path(__file__).resolve().parents[1] / "config"

M1 = np.array(
    [
        [1.5, -0.5, 0.0, 0.0],
        [-0.5, 1.5, 0.0, 0.0],
        [0.0, 0.0, 3.5, -0.5],
        [0.0, 0.0, -0.5, 3.5],
    ]
)


@pytest.fixture
def m1() -> np.ndarray:
    return M1.copy()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def config_dir() -> Path:
    return CONFIG_DIR


def _random_instance(rng: np.random.Generator, d: int):
    a = rng.standard_normal((d, d))
    M = 0.5 * (a + a.T)
    l = rng.standard_normal(d)
    b = rng.standard_normal((d, d))
    J = 0.5 * (b - b.T)
    return M, l, J


@pytest.fixture
def random_instance():
    """Factory for random symmetric M, vector l and antisymmetric J."""
    return _random_instance

