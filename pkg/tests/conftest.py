import numpy as np
import pytest

from exitwise.harness import ExitLog


def random_dists(rng, shape, concentration=1.0):
    """Dirichlet samples with the class axis last."""
    *lead, C = shape
    return rng.dirichlet(np.full(C, concentration), size=tuple(lead))


def random_exitlog(rng, n=50, L=12, C=2):
    """Exit log whose heads drift towards the gold label with depth."""
    gold = rng.integers(0, C, size=n)
    dists = random_dists(rng, (n, L, C), concentration=0.7)
    boost = np.linspace(0.0, 0.6, L)[None, :] * rng.uniform(0, 1, size=(n, 1))
    dists[np.arange(n), :, gold] += boost
    dists /= dists.sum(axis=-1, keepdims=True)
    return ExitLog(dists, gold)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
