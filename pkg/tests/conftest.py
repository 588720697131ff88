import numpy as np
import pytest

from besovlab.spectral import GridSpec, forward_transform


@pytest.fixture(scope="session")
def grid2_32():
    return GridSpec(2, 32)


@pytest.fixture(scope="session")
def grid2_64():
    return GridSpec(2, 64)


@pytest.fixture(scope="session")
def grid3_16():
    return GridSpec(3, 16)


def field_of(grid, fn):
    return forward_transform(grid, fn(*grid.meshgrid()))


def l2_of_samples(grid, samples):
    return float(np.sqrt(np.sum(samples ** 2) * grid.cell_volume))
