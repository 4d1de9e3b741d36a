import numpy as np
import pytest

from sphassim.datasets import gen_synthetic_rotation
from sphassim.sinr import SinrDims, init_sinr_params
from sphassim.sphere import gauss_legendre_grid


@pytest.fixture(scope="session")
def quad_grid():
    """Shared quadrature grid, exact for products of degree <= 31 harmonics."""
    return gauss_legendre_grid(32, 64)


@pytest.fixture(scope="session")
def small_sinr():
    """A small random decoder with live modulation, shared by read-only tests."""
    dims = SinrDims(L=2, D=2, h=8, m=5, c=2)
    return init_sinr_params(dims, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset():
    return gen_synthetic_rotation(seed=5, n_traj=2, n_steps=10, ell_max=2,
                                  omega=0.25, nlon=16, nlat=8).normalize()
