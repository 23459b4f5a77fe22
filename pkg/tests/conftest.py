import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from actcodec_core.harness import SyntheticSource  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def correlated_tensors():
    """Eight 16x16x64 tensors from the rho = 0.9 equicorrelated source."""
    return SyntheticSource.equicorrelated(64, 0.9, seed=7).tensors(8, 16, 16)


@pytest.fixture
def small_tensors():
    """Four 6x5x8 tensors with correlated channels and a non-zero mean."""
    source = SyntheticSource.from_spectrum(np.geomspace(4.0, 0.05, 8), seed=3)
    return [
        type(t)(t.data + np.linspace(-1.0, 1.0, 8, dtype=np.float32))
        for t in source.tensors(4, 6, 5)
    ]
