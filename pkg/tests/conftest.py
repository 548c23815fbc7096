import numpy as np
import pytest

from haarnet import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """Run a test once per available kernel backend."""
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)
