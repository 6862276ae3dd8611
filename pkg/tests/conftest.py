import numpy as np
import pytest

from stratfit.data import Dataset
from stratfit.logger import setup_logger


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def fresh_logger():
    # CLI runs swap sys.stderr; rebuild handlers so later tests log to the real stream
    yield
    setup_logger()


def two_node_data() -> Dataset:
    """One record per node, x = 1, y = 1 at node 0 and y = 0 at node 1."""
    return Dataset([('0',), ('1',)], np.ones((2, 1)), np.array([1.0, 0.0]), ['node'], ['x'])


def smooth_bernoulli_grid(n_side=10, per_node=10, seed=0):
    """Bernoulli records on an n_side x n_side grid with smoothly varying probabilities.

    Returns:
        (probabilities, train records sampler) where the sampler draws
        ``count`` records per node with a given seed
    """
    i, j = np.meshgrid(np.arange(n_side), np.arange(n_side), indexing='ij')
    p = 0.5 + 0.35 * np.sin(np.pi * i / (n_side - 1)) * np.cos(np.pi * j / (n_side - 1))
    p = p.ravel()
    keys = [(str(a), str(b)) for a in range(n_side) for b in range(n_side)]

    def sample(count, sample_seed):
        g = np.random.default_rng(sample_seed)
        rec_keys = [k for k in keys for _ in range(count)]
        y = (g.random(len(rec_keys)) < np.repeat(p, count)).astype(float)
        return Dataset(rec_keys, None, y, ['row', 'col'])

    return p, sample(per_node, seed), sample
