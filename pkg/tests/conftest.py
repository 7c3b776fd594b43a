import numpy as np
import pytest

from ridge_twfe.graph import build_graph, graph_from_arrays
from ridge_twfe.sbm import SbmParams, desk_params, draw_assignment, design_affinity


def connected_graph(seed, n, p, extra=0, max_mult=3):
    """Random connected graph with n >= p: firms chained through workers 0..p-1, plus random extra edges."""
    gen = np.random.default_rng(seed)
    workers = [np.arange(n), np.arange(p)]
    firms = [np.arange(n) % p, (np.arange(p) + 1) % p]
    if extra:
        workers.append(gen.integers(0, n, extra))
        firms.append(gen.integers(0, p, extra))
    workers = np.concatenate(workers)
    firms = np.concatenate(firms)
    mult = gen.integers(1, max_mult + 1, workers.size)
    return graph_from_arrays(workers, firms, mult, n, p)


def small_params(n0=40, p0=20, K=2, c=4.0, seed=0):
    """Block model with equal theta inside each firm group, so no pair probability exceeds one."""
    return SbmParams.uniform(n0, p0, design_affinity(c, K, p0, 0.1), theta_pareto_alpha=np.inf, seed=seed)


@pytest.fixture
def tiny_graph():
    # worker 1 links both firms
    return build_graph([(0, 0, 1), (1, 0, 2), (1, 1, 1), (2, 1, 1)])


@pytest.fixture
def split_graph():
    """Two single-edge components and an isolated worker."""
    return build_graph([(0, 0, 1), (1, 1, 2)], n_workers=3, n_firms=2)


@pytest.fixture
def make_graph():
    return connected_graph


@pytest.fixture
def desk_assignment():
    params = desk_params(seed=3)
    return params, draw_assignment(params)


@pytest.fixture
def small_model():
    params = small_params()
    return params, draw_assignment(params)


@pytest.fixture
def make_params():
    return small_params
