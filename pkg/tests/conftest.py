import numpy as np
import pytest

from torusmfg import measures
from torusmfg.coupling import FourierKernel, ModelParams
from torusmfg.grid import TorusGrid


@pytest.fixture
def grid1():
    return TorusGrid(1, 128)


@pytest.fixture
def grid2():
    return TorusGrid(2, 32)


@pytest.fixture
def unit_params():
    return ModelParams(1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_band_limited(rng, grid, degree=6):
    """Real trigonometric polynomial with modes up to ``degree`` per axis."""
    coeffs = np.zeros(grid.shape, dtype=complex)
    idx = np.r_[0 : degree + 1, grid.n - degree : grid.n]
    block = np.ix_(*([idx] * grid.dim))
    coeffs[block] = rng.standard_normal(coeffs[block].shape) + 1j * rng.standard_normal(coeffs[block].shape)
    return np.real(np.fft.ifftn(coeffs)) * grid.n**grid.dim


def random_positive_density(rng, grid, degree=4):
    f = random_band_limited(rng, grid, degree)
    f = f - f.min() + 0.2 * (f.max() - f.min()) + 1e-3
    return measures.normalize(grid, f)


@pytest.fixture
def kuramoto2():
    return FourierKernel.kuramoto(2.0)
