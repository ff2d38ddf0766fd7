import numpy as np
import pytest

from ibdinfer.design import build_design, reference_design_5_3
from ibdinfer.population import PotentialOutcomes
from ibdinfer.randomize import block_labels


@pytest.fixture
def design48():
    """Smallest balanced design: 3 blocks of 2 units, pairs from 3 treatments."""
    return build_design(3, 3, 2, [(1, 2), (1, 3), (2, 3)], (1, 1, 1), (2, 2, 2))


@pytest.fixture
def design5760():
    """Six blocks of 2 units, every pair in two blocks."""
    return build_design(6, 3, 2, [(1, 2), (1, 3), (2, 3)], (2, 2, 2), (2,) * 6)


@pytest.fixture
def design_guarded():
    """Six blocks of 4 units: all variance-estimator guards hold."""
    return build_design(6, 3, 2, [(1, 2), (1, 3), (2, 3)], (2, 2, 2), (4,) * 6)


@pytest.fixture
def table1():
    return reference_design_5_3()


def random_population(design, seed, loc=5.0, scale=3.0):
    rng = np.random.default_rng(seed)
    n = sum(design.block_sizes)
    return PotentialOutcomes(
        rng.normal(loc, scale, size=(n, design.n_treatments)), block_labels(design))


@pytest.fixture
def po48(design48):
    return random_population(design48, seed=7)
