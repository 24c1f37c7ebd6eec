import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from services.data_stream import StreamConfig
from services.regression import ProblemSpec


@pytest.fixture
def planar_spec():
    """The two-dimensional problem: w* = [3, 5], E[xx^T] = diag(3, 1), unit noise."""
    return ProblemSpec(true_weights=np.array([3.0, 5.0]), feature_cov=np.diag([3.0, 1.0]), noise_std=1.0)


@pytest.fixture
def noiseless_spec():
    return ProblemSpec(true_weights=np.array([3.0, 5.0]), feature_cov=np.diag([3.0, 1.0]), noise_std=0.0)


@pytest.fixture
def scalar_spec():
    """dim 1, w* = 0, E[x^2] = 1, no noise."""
    return ProblemSpec(true_weights=np.array([0.0]), feature_cov=np.array([[1.0]]), noise_std=0.0)


@pytest.fixture
def planar_stream(planar_spec):
    return StreamConfig(spec=planar_spec, batch_size=5, num_agents=2, seed=0)


def random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T + dim * np.eye(dim)


def random_spec(rng: np.random.Generator, dim: int, noise_std: float = 1.0) -> ProblemSpec:
    return ProblemSpec(true_weights=rng.standard_normal(dim) * 3.0, feature_cov=random_spd(rng, dim), noise_std=noise_std)
