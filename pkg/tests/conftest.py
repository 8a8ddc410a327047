import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flocinv.domain import Grid, builtin_kernels, default_kernels, project
from flocinv.harness import truth_measure

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def exp_density(x):
    return 1e3 * np.exp(-x)


@pytest.fixture
def kernels():
    return default_kernels()


@pytest.fixture
def grid8():
    return Grid(8, 1.0)


@pytest.fixture
def beta22():
    return truth_measure("beta22")


@pytest.fixture
def arcsine():
    return truth_measure("arcsine")


def constant_kernels(kappa, x_max=1.0):
    """``k_a = kappa`` on admissible pairs, no breakage or removal."""
    from flocinv.domain import KernelSet

    def k_a(x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.where(x + y <= x_max * (1 + 1e-12), kappa, 0.0)

    zero = lambda x: np.zeros_like(np.asarray(x, float))
    return KernelSet(k_a, zero, zero, x_max)


def initial(grid):
    return project(exp_density, grid)


__all__ = ["builtin_kernels", "constant_kernels", "exp_density", "initial"]
