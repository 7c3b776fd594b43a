"""
Sparse bipartite worker-firm graphs
---------------------------------------------------------------------------

Edges are stored as a coordinate list sorted by (firm, worker), with a
compressed pointer over firms. Adjacency, normalized adjacency and the
regularized Laplacians are exposed as scipy sparse matrices or
``LinearOperator`` objects; nothing here densifies a one-mode projection
unless asked to by ``dense_spectrum``.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.sparse.linalg import LinearOperator

from ridge_twfe.errors import ConfigError, GraphError

log = logging.getLogger(__name__)

DENSE_CAP = 2000


def rowscale(d, x):
    return d[:, None] * x if x.ndim == 2 else d * x


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    n_workers: int
    n_firms: int
    workers: np.ndarray
    firms: np.ndarray
    mult: np.ndarray
    worker_degrees: np.ndarray
    firm_degrees: np.ndarray
    firm_ptr: np.ndarray

    @property
    def n_obs(self):
        return int(self.mult.sum())

    @property
    def n_edges(self):
        return int(self.mult.size)

    @property
    def shape(self):
        return (self.n_workers, self.n_firms)

    @property
    def isolated_workers(self):
        return np.flatnonzero(self.worker_degrees == 0)

    @property
    def isolated_firms(self):
        return np.flatnonzero(self.firm_degrees == 0)

    @cached_property
    def adjacency(self):
        """B = (d_ij) as a CSR matrix of shape (n, p)."""
        return sps.csr_matrix((self.mult.astype(float), (self.workers, self.firms)), shape=self.shape)

    @cached_property
    def adjacency_t(self):
        return self.adjacency.T.tocsr()

    def edge_list(self):
        return list(zip(self.workers.tolist(), self.firms.tolist(), self.mult.tolist()))

    def __repr__(self):
        return f"BipartiteGraph(n={self.n_workers}, p={self.n_firms}, N={self.n_obs}, edges={self.n_edges})"


@dataclass(frozen=True)
class RidgePenalties:
    lambda_w: float
    lambda_f: float

    def __post_init__(self):
        for name in ("lambda_w", "lambda_f"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def uniform(cls, lam):
        return cls(lam, lam)

    @property
    def positive(self):
        return self.lambda_w > 0 and self.lambda_f > 0

    def scaled(self, factor):
        return RidgePenalties(self.lambda_w * factor, self.lambda_f * factor)

    def as_dict(self):
        return {"lambda_w": self.lambda_w, "lambda_f": self.lambda_f}


ZERO_PENALTIES = RidgePenalties(0.0, 0.0)


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    worker_component: np.ndarray
    firm_component: np.ndarray
    component_sizes: np.ndarray  # rows: (workers, firms, observations)

    @property
    def n_components(self):
        return int(self.component_sizes.shape[0])

    @property
    def n_nonempty_components(self):
        """Components with at least one edge; isolated nodes are not counted."""
        return int(np.count_nonzero(self.component_sizes[:, 2]))


@dataclass(frozen=True, eq=False)
class NodeMapping:
    """Kept original indices, in new-index order, for both node kinds."""

    workers: np.ndarray
    firms: np.ndarray

    @classmethod
    def identity(cls, n, p):
        return cls(np.arange(n), np.arange(p))

    def worker_old_to_new(self, n_old):
        out = np.full(n_old, -1, dtype=np.int64)
        out[self.workers] = np.arange(self.workers.size)
        return out

    def firm_old_to_new(self, p_old):
        out = np.full(p_old, -1, dtype=np.int64)
        out[self.firms] = np.arange(self.firms.size)
        return out

    def compose(self, inner):
        """Mapping of a subgraph taken from the graph this mapping produced."""
        return NodeMapping(self.workers[inner.workers], self.firms[inner.firms])


def graph_from_arrays(workers, firms, mult, n_workers, n_firms):
    workers = np.asarray(workers, dtype=np.int64).ravel()
    firms = np.asarray(firms, dtype=np.int64).ravel()
    mult = np.asarray(mult, dtype=np.int64).ravel()
    n_workers, n_firms = int(n_workers), int(n_firms)
    if not (workers.size == firms.size == mult.size):
        raise GraphError("worker, firm and multiplicity arrays differ in length")
    if np.any(mult < 0):
        raise GraphError("negative multiplicity in edge list")
    if workers.size and (workers.min() < 0 or workers.max() >= n_workers):
        raise GraphError(f"worker index out of range [0, {n_workers})")
    if firms.size and (firms.min() < 0 or firms.max() >= n_firms):
        raise GraphError(f"firm index out of range [0, {n_firms})")

    keep = mult > 0
    workers, firms, mult = workers[keep], firms[keep], mult[keep]
    key = firms * max(n_workers, 1) + workers
    uniq, inverse = np.unique(key, return_inverse=True)
    summed = np.bincount(inverse, weights=mult, minlength=uniq.size).astype(np.int64)
    u_firms, u_workers = np.divmod(uniq, max(n_workers, 1))

    worker_degrees = np.bincount(u_workers, weights=summed, minlength=n_workers).astype(np.int64)
    firm_degrees = np.bincount(u_firms, weights=summed, minlength=n_firms).astype(np.int64)
    firm_ptr = np.searchsorted(u_firms, np.arange(n_firms + 1))
    return BipartiteGraph(n_workers, n_firms, u_workers, u_firms, summed, worker_degrees, firm_degrees, firm_ptr)


def build_graph(edge_list, n_workers=None, n_firms=None):
    """Build a graph from (worker, firm, multiplicity) triples.

    Duplicate pairs are summed and zero multiplicities dropped. Node counts
    default to one past the largest index seen; nodes without edges are
    kept with degree zero.
    """
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 3)
    workers, firms, mult = edges[:, 0], edges[:, 1], edges[:, 2]
    if n_workers is None:
        n_workers = int(workers.max()) + 1 if workers.size else 0
    if n_firms is None:
        n_firms = int(firms.max()) + 1 if firms.size else 0
    g = graph_from_arrays(workers, firms, mult, n_workers, n_firms)
    if g.isolated_workers.size or g.isolated_firms.size:
        log.debug("graph has %d isolated workers and %d isolated firms", g.isolated_workers.size, g.isolated_firms.size)
    return g


def connected_components(g):
    """Label connected components; isolated nodes form singleton components."""
    n, p = g.shape
    if n + p == 0:
        return ComponentLabeling(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64))
    if n == 0 or p == 0:
        n_comp, labels = n + p, np.arange(n + p)
    else:
        joint = sps.bmat([[sps.csr_matrix((n, n)), g.adjacency], [g.adjacency_t, sps.csr_matrix((p, p))]], format="csr")
        n_comp, labels = _csgraph_components(joint, directed=False)
    worker_component = labels[:n].astype(np.int64)
    firm_component = labels[n:].astype(np.int64)
    sizes = np.zeros((n_comp, 3), dtype=np.int64)
    sizes[:, 0] = np.bincount(worker_component, minlength=n_comp)
    sizes[:, 1] = np.bincount(firm_component, minlength=n_comp)
    sizes[:, 2] = np.bincount(worker_component, weights=g.worker_degrees, minlength=n_comp).astype(np.int64)
    return ComponentLabeling(worker_component, firm_component, sizes)


def subgraph(g, worker_mask, firm_mask):
    """Induced subgraph on the masked nodes, relabeled contiguously."""
    worker_mask = np.asarray(worker_mask, dtype=bool)
    firm_mask = np.asarray(firm_mask, dtype=bool)
    mapping = NodeMapping(np.flatnonzero(worker_mask), np.flatnonzero(firm_mask))
    new_w = mapping.worker_old_to_new(g.n_workers)
    new_f = mapping.firm_old_to_new(g.n_firms)
    keep = worker_mask[g.workers] & firm_mask[g.firms]
    sub = graph_from_arrays(new_w[g.workers[keep]], new_f[g.firms[keep]], g.mult[keep], mapping.workers.size, mapping.firms.size)
    return sub, mapping


class ComponentSelection(NamedTuple):
    graph: BipartiteGraph
    mapping: NodeMapping
    labeling: ComponentLabeling


def largest_component(g, labeling=None):
    """Keep the component with the most observations.

    Ties go to the component with more workers, then to the one holding the
    lowest original worker index.
    """
    labeling = labeling if labeling is not None else connected_components(g)
    if g.n_obs == 0:
        empty, mapping = subgraph(g, np.zeros(g.n_workers, bool), np.zeros(g.n_firms, bool))
        return ComponentSelection(empty, mapping, labeling)
    sizes = labeling.component_sizes
    lowest_worker = np.full(labeling.n_components, g.n_workers, dtype=np.int64)
    np.minimum.at(lowest_worker, labeling.worker_component, np.arange(g.n_workers))
    order = np.lexsort((lowest_worker, -sizes[:, 0], -sizes[:, 2]))
    best = int(order[0])
    sub, mapping = subgraph(g, labeling.worker_component == best, labeling.firm_component == best)
    log.debug("largest component %d: n=%d p=%d N=%d of %d components", best, sub.n_workers, sub.n_firms, sub.n_obs, labeling.n_components)
    return ComponentSelection(sub, mapping, labeling)


def trim_min_degrees(g, min_worker_obs=1, min_firm_obs=1):
    """Drop workers and firms below the observation thresholds until none remain."""
    mapping = NodeMapping.identity(*g.shape)
    rounds = 0
    while True:
        wmask = g.worker_degrees >= min_worker_obs
        fmask = g.firm_degrees >= min_firm_obs
        if wmask.all() and fmask.all():
            break
        g, inner = subgraph(g, wmask, fmask)
        mapping = mapping.compose(inner)
        rounds += 1
    log.debug("degree trimming converged after %d rounds: n=%d p=%d N=%d", rounds, g.n_workers, g.n_firms, g.n_obs)
    return g, mapping


def _regularized_degrees(g, lam):
    dw = g.worker_degrees.astype(float) + lam.lambda_w
    df = g.firm_degrees.astype(float) + lam.lambda_f
    if np.any(dw <= 0):
        raise GraphError("zero worker degree with lambda_w = 0; restrict to nodes with positive degree")
    if np.any(df <= 0):
        raise GraphError("zero firm degree with lambda_f = 0; restrict to nodes with positive degree")
    return dw, df


def normalized_adjacency(g, lam=ZERO_PENALTIES):
    """E_lambda = D_w^{-1/2} B D_f^{-1/2} with penalty-inflated degrees."""
    dw, df = _regularized_degrees(g, lam)
    return (sps.diags(1.0 / np.sqrt(dw)) @ g.adjacency @ sps.diags(1.0 / np.sqrt(df))).tocsr()


class RegularizedLaplacians(NamedTuple):
    l_w: LinearOperator
    l_f: LinearOperator
    lt_w: LinearOperator
    lt_f: LinearOperator


def _symmetric_operator(size, apply):
    return LinearOperator((size, size), matvec=apply, rmatvec=apply, matmat=apply, dtype=float)


def regularized_laplacians(g, lam=ZERO_PENALTIES):
    """Normalized (L) and Schur-form (L-tilde) Laplacians on both sides."""
    dw, df = _regularized_degrees(g, lam)
    e = normalized_adjacency(g, lam)
    et = e.T.tocsr()
    b, bt = g.adjacency, g.adjacency_t

    def l_w(x):
        return x - e @ (et @ x)

    def l_f(x):
        return x - et @ (e @ x)

    def lt_w(x):
        return rowscale(dw, x) - b @ rowscale(1.0 / df, bt @ x)

    def lt_f(x):
        return rowscale(df, x) - bt @ rowscale(1.0 / dw, b @ x)

    n, p = g.shape
    return RegularizedLaplacians(_symmetric_operator(n, l_w), _symmetric_operator(p, l_f), _symmetric_operator(n, lt_w), _symmetric_operator(p, lt_f))


def firm_projection(g, lam=ZERO_PENALTIES):
    """One-mode projection of the firms, A_f = E^T E."""
    e = normalized_adjacency(g, lam)
    return (e.T @ e).tocsr()


def worker_projection(g, lam=ZERO_PENALTIES):
    e = normalized_adjacency(g, lam)
    return (e @ e.T).tocsr()


def densify(op):
    if isinstance(op, np.ndarray):
        return op
    if sps.issparse(op):
        return op.toarray()
    return op @ np.eye(op.shape[1])


def dense_spectrum(op, cap=DENSE_CAP):
    """Sorted eigenvalues of a symmetric operator, for desk-scale checks only."""
    size = op.shape[0]
    if size > cap:
        raise GraphError(f"operator of size {size} exceeds the dense cap {cap}; use operator_norm instead")
    a = np.asarray(densify(op), dtype=float)
    return np.linalg.eigvalsh(0.5 * (a + a.T))


class SpectralNorm(NamedTuple):
    value: float
    converged: bool
    iterations: int
    vector: np.ndarray


def operator_norm(op, tol=1e-8, max_iter=10000):
    """Spectral norm by power iteration on op^T op.

    The start vector is the normalized all-ones vector. Non-convergence is
    reported through the ``converged`` flag together with the last iterate.
    """
    m = op.shape[1]
    if m == 0 or op.shape[0] == 0:
        return SpectralNorm(0.0, True, 0, np.zeros(m))
    v = np.ones(m) / np.sqrt(m)
    previous = None
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = op @ v
        lam = float(y @ y)
        z = op.T @ y
        z_norm = float(np.linalg.norm(z))
        if z_norm == 0.0:
            return SpectralNorm(float(np.sqrt(lam)), True, it, v)
        v = z / z_norm
        if previous is not None and abs(lam - previous) <= tol * lam:
            return SpectralNorm(float(np.sqrt(lam)), True, it, v)
        previous = lam
    log.warning("power iteration did not converge after %d iterations (estimate %.6g)", max_iter, np.sqrt(lam))
    return SpectralNorm(float(np.sqrt(lam)), False, max_iter, v)


def graph_summary(g, labeling=None):
    """Network characteristics in the layout of the simulated-network table."""
    n, p = g.shape
    big_n = g.n_obs
    labeling = labeling if labeling is not None else connected_components(g)
    return {
        "n": n,
        "p": p,
        "N": big_n,
        "n_components": labeling.n_nonempty_components,
        "sparsity": big_n / (n * p) if n and p else 0.0,
        "avg_worker_degree": big_n / n if n else 0.0,
        "avg_firm_degree": big_n / p if p else 0.0,
        "n_matches": g.n_edges,
        "avg_obs_per_match": big_n / g.n_edges if g.n_edges else 0.0,
    }
