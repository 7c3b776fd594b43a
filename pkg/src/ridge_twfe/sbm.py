"""
Degree-corrected stochastic block model
---------------------------------------------------------------------------

Workers draw a type k_i from pi_w, firms a type l_j from pi_f and a degree
parameter theta_j (Pareto, renormalized to sum to one inside each firm
group). A worker-firm pair is matched with probability

    p_ij = theta_j C(k_i, l_j) / n_{k_i}.

``ExpectedNetwork`` holds the expected adjacency (p_ij) and the
penalty-dependent normalized objects in rank-K factored form.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator

from ridge_twfe.errors import SbmError
from ridge_twfe.graph import ZERO_PENALTIES, graph_from_arrays, rowscale
from ridge_twfe.rng import RngStreams

log = logging.getLogger(__name__)

CLIP_MASS_LIMIT = 1e-3
SIDES = ("worker", "firm")


def _check_side(side):
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")


@dataclass(frozen=True, eq=False)
class SbmParams:
    n0: int
    p0: int
    K: int
    pi_w: np.ndarray
    pi_f: np.ndarray
    affinity: np.ndarray
    theta_pareto_alpha: float = 2.0
    theta_min: float = 1.0
    seed: int = 0

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "pi_w", np.asarray(self.pi_w, dtype=float).ravel())
        set_(self, "pi_f", np.asarray(self.pi_f, dtype=float).ravel())
        set_(self, "affinity", np.asarray(self.affinity, dtype=float))
        set_(self, "theta_pareto_alpha", float(self.theta_pareto_alpha))
        set_(self, "theta_min", float(self.theta_min))
        if self.K < 1:
            raise SbmError(f"K must be at least 1, got {self.K}")
        if self.n0 < 0 or self.p0 < 0:
            raise SbmError("n0 and p0 must be nonnegative")
        for name in ("pi_w", "pi_f"):
            pi = getattr(self, name)
            if pi.shape != (self.K,) or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
                raise SbmError(f"{name} must be a probability vector of length K={self.K}")
        if self.affinity.shape != (self.K, self.K) or not np.all(np.isfinite(self.affinity)) or np.any(self.affinity < 0):
            raise SbmError("affinity must be a finite nonnegative K x K matrix")
        if not self.theta_pareto_alpha > 0 or not self.theta_min > 0:
            raise SbmError("Pareto shape and scale must be positive")

    @classmethod
    def uniform(cls, n0, p0, affinity, **kwargs):
        K = np.asarray(affinity).shape[0]
        return cls(n0, p0, K, np.full(K, 1.0 / K), np.full(K, 1.0 / K), affinity, **kwargs)

    def to_dict(self):
        return {
            "n0": int(self.n0),
            "p0": int(self.p0),
            "K": int(self.K),
            "pi_w": self.pi_w.tolist(),
            "pi_f": self.pi_f.tolist(),
            "affinity": self.affinity.tolist(),
            "theta_pareto_alpha": None if np.isinf(self.theta_pareto_alpha) else self.theta_pareto_alpha,
            "theta_min": self.theta_min,
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data):
        alpha = data.get("theta_pareto_alpha", 2.0)
        return cls(
            n0=int(data["n0"]),
            p0=int(data["p0"]),
            K=int(data["K"]),
            pi_w=data["pi_w"],
            pi_f=data["pi_f"],
            affinity=data["affinity"],
            theta_pareto_alpha=np.inf if alpha is None else alpha,
            theta_min=data.get("theta_min", 1.0),
            seed=int(data.get("seed", 0)),
        )


def design_affinity(c, K, p0, delta):
    """C = c (p0/K) [I + delta (J - I)]."""
    if not c > 0:
        raise SbmError(f"affinity scale c must be positive, got {c}")
    if not 0.0 <= delta <= 1.0:
        raise SbmError(f"delta must lie in [0, 1], got {delta}")
    eye = np.eye(K)
    return c * (p0 / K) * (eye + delta * (np.ones((K, K)) - eye))


paper_affinity = design_affinity


DESIGN_FIRMS = {1: 30000, 2: 4500}


def design_params(c, seed=0, K=5, delta=0.1):
    """Simulation design with n0 = 3 p0; p0 depends on the density scale c."""
    if c not in DESIGN_FIRMS:
        raise SbmError(f"no simulation preset for c={c}; known values are {sorted(DESIGN_FIRMS)}")
    p0 = DESIGN_FIRMS[c]
    return SbmParams.uniform(3 * p0, p0, design_affinity(c, K, p0, delta), seed=seed)


def desk_params(seed=0):
    return SbmParams.uniform(600, 200, design_affinity(4.0, 3, 200, 0.1), seed=seed)


@dataclass(frozen=True, eq=False)
class NodeAssignment:
    """Types are stored 0-based; CSV files carry them 1-based."""

    worker_types: np.ndarray
    firm_types: np.ndarray
    theta: np.ndarray
    K: int

    @property
    def n(self):
        return int(self.worker_types.size)

    @property
    def p(self):
        return int(self.firm_types.size)

    @cached_property
    def group_counts(self):
        return np.bincount(self.worker_types, minlength=self.K)

    @cached_property
    def firm_group_counts(self):
        return np.bincount(self.firm_types, minlength=self.K)

    @cached_property
    def worker_indicator(self):
        return sps.csr_matrix((np.ones(self.n), (np.arange(self.n), self.worker_types)), shape=(self.n, self.K))

    @cached_property
    def firm_indicator(self):
        return sps.csr_matrix((np.ones(self.p), (np.arange(self.p), self.firm_types)), shape=(self.p, self.K))

    def theta_group_sums(self):
        return np.bincount(self.firm_types, weights=self.theta, minlength=self.K)

    def restrict(self, worker_index, firm_index):
        """Assignment of a node subset; theta is kept as drawn, not renormalized."""
        return NodeAssignment(self.worker_types[worker_index], self.firm_types[firm_index], self.theta[firm_index], self.K)


def draw_assignment(params, rng=None):
    """Draw worker types, firm types and theta from the streams of ``rng``."""
    rng = rng if rng is not None else RngStreams(params.seed)
    K = params.K
    worker_types = rng.stream("worker_types").choice(K, size=params.n0, p=params.pi_w)
    firm_types = rng.stream("firm_types").choice(K, size=params.p0, p=params.pi_f)
    if np.isinf(params.theta_pareto_alpha):
        raw = np.full(params.p0, params.theta_min)
    else:
        raw = params.theta_min * (1.0 + rng.stream("theta").pareto(params.theta_pareto_alpha, size=params.p0))
    sums = np.bincount(firm_types, weights=raw, minlength=K)
    theta = raw / sums[firm_types] if params.p0 else raw
    assignment = NodeAssignment(worker_types.astype(np.int64), firm_types.astype(np.int64), theta, K)

    for kind, counts, pi in (("worker", assignment.group_counts, params.pi_w), ("firm", assignment.firm_group_counts, params.pi_f)):
        empty = np.flatnonzero((counts == 0) & (pi > 0))
        if empty.size:
            log.warning("%s groups %s drew no members", kind, (empty + 1).tolist())
    return assignment


class ClippingStats(NamedTuple):
    pairs: int
    clipped_mass: float
    total_mass: float

    @property
    def fraction(self):
        return self.clipped_mass / self.total_mass if self.total_mass > 0 else 0.0


class EdgeProbabilities:
    """Lazy accessor for p_ij; values above one are clipped and counted."""

    def __init__(self, assignment, affinity):
        self.assignment = assignment
        self.affinity = np.asarray(affinity, dtype=float)
        counts = assignment.group_counts
        self.inv_group_counts = np.divide(1.0, counts, out=np.zeros(assignment.K), where=counts > 0)

    def raw(self, i, j):
        a = self.assignment
        k = a.worker_types[i]
        return a.theta[j] * self.affinity[k, a.firm_types[j]] * self.inv_group_counts[k]

    def __call__(self, i, j):
        return np.minimum(self.raw(i, j), 1.0)

    def group_rates(self):
        """(K, p) array of theta_j C(k, l_j) / n_k, the raw p_ij shared by all workers of type k."""
        a = self.assignment
        return self.affinity[:, a.firm_types] * a.theta[None, :] * self.inv_group_counts[:, None]

    @cached_property
    def clipping(self):
        rates = self.group_rates()
        counts = self.assignment.group_counts[:, None]
        excess = np.maximum(rates - 1.0, 0.0)
        return ClippingStats(int((counts * (rates > 1.0)).sum()), float((counts * excess).sum()), float((counts * rates).sum()))

    def dense(self):
        a = self.assignment
        return self(np.repeat(np.arange(a.n), a.p), np.tile(np.arange(a.p), a.n)).reshape(a.n, a.p)


def edge_probabilities(assignment, affinity):
    return EdgeProbabilities(assignment, affinity)


def _distinct_positions(gen, size, counts):
    """Per segment, ``counts[f]`` distinct draws from range(size), uniform over subsets."""
    total = int(counts.sum())
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])) if counts.size else np.zeros(0, np.int64)
    owner = np.repeat(np.arange(counts.size), counts)
    pos = gen.integers(0, size, size=total)
    for f in np.flatnonzero(counts > size // 2):
        pos[starts[f] : starts[f] + counts[f]] = gen.permutation(size)[: counts[f]]
    while total:
        key = owner * size + pos
        _, first = np.unique(key, return_index=True)
        dup = np.ones(total, dtype=bool)
        dup[first] = False
        if not dup.any():
            break
        pos[dup] = gen.integers(0, size, size=int(dup.sum()))
    return pos


def sample_edges(assignment, affinity, rng, *labels):
    """Bernoulli(p_ij) network for a fixed assignment.

    Each (k, l) block uses its own stream. Within a block every firm's
    match count is Binomial(n_k, p_j) and its partners are a uniform subset
    of the type-k workers, which is the same law as independent pair draws
    at O(realized edges) cost.
    """
    a = assignment
    probs = edge_probabilities(a, affinity)
    stats = probs.clipping
    if stats.pairs:
        if stats.fraction > CLIP_MASS_LIMIT:
            raise SbmError(
                f"{stats.pairs} pairs have p_ij > 1; clipped mass {stats.fraction:.2%} exceeds {CLIP_MASS_LIMIT:.1%} of the expected edge count"
            )
        log.warning("clipped %d pairs with p_ij > 1 (%.4f%% of expected edges)", stats.pairs, 100 * stats.fraction)

    worker_groups = [np.flatnonzero(a.worker_types == k) for k in range(a.K)]
    firm_groups = [np.flatnonzero(a.firm_types == k) for k in range(a.K)]
    rates = probs.group_rates()
    parts_w, parts_f = [], []
    for k, members in enumerate(worker_groups):
        if members.size == 0:
            continue
        for ell, firms in enumerate(firm_groups):
            if firms.size == 0 or probs.affinity[k, ell] == 0:
                continue
            gen = rng.stream(*labels, k, ell)
            counts = gen.binomial(members.size, np.minimum(rates[k, firms], 1.0))
            parts_w.append(members[_distinct_positions(gen, members.size, counts)])
            parts_f.append(np.repeat(firms, counts))
    workers = np.concatenate(parts_w) if parts_w else np.zeros(0, np.int64)
    firms = np.concatenate(parts_f) if parts_f else np.zeros(0, np.int64)
    return graph_from_arrays(workers, firms, np.ones(workers.size, np.int64), a.n, a.p)


def sample_network(params, rng=None, assignment=None, label="network"):
    rng = rng if rng is not None else RngStreams(params.seed)
    assignment = assignment if assignment is not None else draw_assignment(params, rng)
    g = sample_edges(assignment, params.affinity, rng, label)
    log.debug("sampled %s: n=%d p=%d N=%d", label, g.n_workers, g.n_firms, g.n_obs)
    return g


class ExpectedNetwork:
    """Deterministic-equivalent network for one assignment and one penalty pair.

    With U_w = diag(omega_{k_i}) Z_w and U_f = diag(phi_j) Z_f, the
    normalized expected adjacency is E = U_w C~ U_f^T, and

        A_f = U_f (C~^T G_w C~) U_f^T,   A_w = U_w (C~ G_f C~^T) U_w^T,

    with G = U^T U diagonal. Laplacian inverses use
    (I - U M U^T)^{-1} = I + U (I - M G)^{-1} M U^T.
    """

    def __init__(self, assignment, affinity, penalties=ZERO_PENALTIES):
        a = assignment
        self.assignment = a
        self.penalties = penalties
        self.n, self.p, self.K = a.n, a.p, a.K
        lam_w, lam_f = penalties.lambda_w, penalties.lambda_f

        counts = a.group_counts.astype(float)
        c_eff = np.array(affinity, dtype=float)
        c_eff[counts == 0, :] = 0.0
        c_eff[:, a.firm_group_counts == 0] = 0.0
        self.affinity = c_eff
        self.inv_group_counts = np.divide(1.0, counts, out=np.zeros(self.K), where=counts > 0)
        self.row_sums = c_eff.sum(axis=1)
        self.col_sums = c_eff.sum(axis=0)
        self.group_worker_degrees = self.row_sums * self.inv_group_counts
        self.expected_worker_degrees = self.group_worker_degrees[a.worker_types]
        self.expected_firm_degrees = a.theta * self.col_sums[a.firm_types]
        if lam_w == 0 and np.any(self.expected_worker_degrees <= 0):
            raise SbmError("zero expected worker degree with lambda_w = 0")
        if lam_f == 0 and np.any(self.expected_firm_degrees <= 0):
            raise SbmError("zero expected firm degree with lambda_f = 0")
        self.dw_lambda = self.expected_worker_degrees + lam_w
        self.df_lambda = self.expected_firm_degrees + lam_f

        denom = np.sqrt(np.outer(self.row_sums, self.col_sums))
        self.c_tilde = np.divide(c_eff, denom, out=np.zeros_like(c_eff), where=denom > 0)
        group_dw = self.group_worker_degrees + lam_w
        self.omega = self.inv_group_counts * np.sqrt(np.divide(self.row_sums, group_dw, out=np.zeros(self.K), where=group_dw > 0))
        self.phi = a.theta * np.sqrt(np.divide(self.col_sums[a.firm_types], self.df_lambda, out=np.zeros(self.p), where=self.df_lambda > 0))

        self.u_w = sps.csr_matrix((self.omega[a.worker_types], (np.arange(self.n), a.worker_types)), shape=(self.n, self.K))
        self.u_f = sps.csr_matrix((self.phi, (np.arange(self.p), a.firm_types)), shape=(self.p, self.K))
        self.g_w = counts * self.omega**2
        self.g_f = np.bincount(a.firm_types, weights=self.phi**2, minlength=self.K)
        self._core = {
            "worker": self.c_tilde @ np.diag(self.g_f) @ self.c_tilde.T,
            "firm": self.c_tilde.T @ np.diag(self.g_w) @ self.c_tilde,
        }
        self._woodbury = {}

    def with_penalties(self, penalties):
        return ExpectedNetwork(self.assignment, self.affinity, penalties)

    # extremal expected degrees
    @property
    def delta_w_min(self):
        nonempty = self.assignment.group_counts > 0
        return float(self.group_worker_degrees[nonempty].min()) if nonempty.any() else 0.0

    @property
    def delta_w_max(self):
        nonempty = self.assignment.group_counts > 0
        return float(self.group_worker_degrees[nonempty].max()) if nonempty.any() else 0.0

    @property
    def delta_f_min(self):
        return float(self.expected_firm_degrees.min()) if self.p else 0.0

    @property
    def delta_f_max(self):
        return float(self.expected_firm_degrees.max()) if self.p else 0.0

    def laplacian_floor(self, side):
        """Lower bound on the smallest eigenvalue of the normalized expected Laplacian."""
        _check_side(side)
        lam = self.penalties.lambda_w if side == "worker" else self.penalties.lambda_f
        top = self.delta_w_max if side == "worker" else self.delta_f_max
        return lam / (top + lam) if top + lam > 0 else 0.0

    def e_norm_bound(self):
        lam_f, top = self.penalties.lambda_f, self.delta_f_max
        return float(np.sqrt(top / (top + lam_f))) if top + lam_f > 0 else 0.0

    # expected adjacency B = (p_ij)
    def adjacency(self, x):
        a = self.assignment
        return rowscale(self.inv_group_counts[a.worker_types], a.worker_indicator @ (self.affinity @ (a.firm_indicator.T @ rowscale(a.theta, x))))

    def adjacency_t(self, y):
        a = self.assignment
        return rowscale(a.theta, a.firm_indicator @ (self.affinity.T @ (a.worker_indicator.T @ rowscale(self.inv_group_counts[a.worker_types], y))))

    # normalized objects
    def e_apply(self, x):
        return self.u_w @ (self.c_tilde @ (self.u_f.T @ x))

    def e_t_apply(self, y):
        return self.u_f @ (self.c_tilde.T @ (self.u_w.T @ y))

    def _factors(self, side):
        _check_side(side)
        return (self.u_w, self.g_w) if side == "worker" else (self.u_f, self.g_f)

    def a_apply(self, side, x):
        u, _ = self._factors(side)
        return u @ (self._core[side] @ (u.T @ x))

    def laplacian_apply(self, side, x):
        return x - self.a_apply(side, x)

    def woodbury_core(self, side):
        """(I - M G)^{-1} M for the side's rank-K Laplacian update."""
        if side not in self._woodbury:
            _, g = self._factors(side)
            m = self._core[side]
            system = np.eye(self.K) - m * g[None, :]
            cond = np.linalg.cond(system)
            if not np.isfinite(cond) or cond > 1e12:
                raise SbmError(f"singular {side} Woodbury core (condition number {cond:.3e}); the expected adjacency norm is not below one")
            self._woodbury[side] = np.linalg.solve(system, m)
        return self._woodbury[side]

    def laplacian_inverse_apply(self, side, x):
        u, _ = self._factors(side)
        return x + u @ (self.woodbury_core(side) @ (u.T @ x))

    def schur_inverse_apply(self, side, x):
        """Inverse of L~ = D^{1/2} L D^{1/2} on the given side."""
        d = self.dw_lambda if side == "worker" else self.df_lambda
        s = 1.0 / np.sqrt(d)
        return rowscale(s, self.laplacian_inverse_apply(side, rowscale(s, x)))

    def worker_schur_solve(self, x):
        return self.schur_inverse_apply("worker", x)

    def firm_schur_solve(self, y):
        return self.schur_inverse_apply("firm", y)

    # operators for matrix-free norms
    def e_operator(self):
        return LinearOperator((self.n, self.p), matvec=self.e_apply, rmatvec=self.e_t_apply, matmat=self.e_apply, rmatmat=self.e_t_apply, dtype=float)

    def _symmetric(self, size, apply):
        return LinearOperator((size, size), matvec=apply, rmatvec=apply, matmat=apply, rmatmat=apply, dtype=float)

    def laplacian_operator(self, side):
        size = self.n if side == "worker" else self.p
        return self._symmetric(size, lambda x: self.laplacian_apply(side, x))

    def laplacian_inverse_operator(self, side):
        size = self.n if side == "worker" else self.p
        return self._symmetric(size, lambda x: self.laplacian_inverse_apply(side, x))

    def schur_inverse_operator(self, side):
        size = self.n if side == "worker" else self.p
        return self._symmetric(size, lambda x: self.schur_inverse_apply(side, x))

    # dense views, test scale only
    def dense_adjacency(self):
        return self.adjacency(np.eye(self.p))

    def dense_e(self):
        return self.e_apply(np.eye(self.p))

    def dense_a(self, side):
        size = self.n if side == "worker" else self.p
        return self.a_apply(side, np.eye(size))

    def __repr__(self):
        return f"ExpectedNetwork(n={self.n}, p={self.p}, K={self.K}, lambda=({self.penalties.lambda_w}, {self.penalties.lambda_f}))"


def expected_network(assignment, affinity, penalties=ZERO_PENALTIES):
    return ExpectedNetwork(assignment, affinity, penalties)


def expected_laplacian_inverse_apply(network, side, x):
    """Apply the inverse normalized expected Laplacian of one side to x."""
    lam = network.penalties.lambda_w if side == "worker" else network.penalties.lambda_f
    _check_side(side)
    if lam <= 0:
        raise SbmError(f"{side}-side penalty must be positive to invert the expected Laplacian")
    return network.laplacian_inverse_apply(side, x)
