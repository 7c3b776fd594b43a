"""
Concentration bounds for regularized Laplacians, bias and variance
---------------------------------------------------------------------------

Each check fixes one node assignment, draws R Bernoulli networks from
independent streams, and compares the realized objects (sparse, Schur
factorized) against the expected-network objects (rank-K, Woodbury).
Spectral deviations are measured matrix-free by power iteration on the
difference operator. Bound expressions and probability floors are pure
scalar functions of ``BoundInputs``.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.sparse.linalg import LinearOperator

from ridge_twfe.errors import ConfigError
from ridge_twfe.estimator import bias_from_operators, variance_operator
from ridge_twfe.graph import RidgePenalties, normalized_adjacency, operator_norm, rowscale
from ridge_twfe.rng import RngStreams
from ridge_twfe.sbm import draw_assignment, expected_network, sample_edges
from ridge_twfe.solvers import SchurSolver

log = logging.getLogger(__name__)

THEOREMS = (1, 2, 3, 4, 5)
POWER_TOL = 1e-8
POWER_MAX_ITER = 10000
IDENTITY_SLACK = 1e-6


@dataclass(frozen=True)
class BoundInputs:
    n: int
    p: int
    penalties: RidgePenalties
    epsilon: float
    dw_min: float
    dw_max: float
    df_min: float
    df_max: float

    @property
    def gamma(self):
        return self.p / self.n if self.n else math.inf

    @property
    def m_w(self):
        return 1.0 / (self.dw_min + self.penalties.lambda_w) if self.dw_min + self.penalties.lambda_w > 0 else math.inf

    @property
    def m_f(self):
        return 1.0 / (self.df_min + self.penalties.lambda_f) if self.df_min + self.penalties.lambda_f > 0 else math.inf

    @property
    def m(self):
        return max(self.m_w, self.m_f)

    @property
    def log_term(self):
        return math.log((self.n + self.p) / self.epsilon)

    @property
    def t(self):
        return math.sqrt(3.0 * self.m * self.log_term)

    @property
    def applicable(self):
        return self.m <= 1.0 / (3.0 * self.log_term)

    @property
    def chi_w(self):
        return max(1.0, self.df_max * self.m_w)

    @property
    def chi_f(self):
        return max(1.0, self.dw_max * self.m_f)

    def ratio(self, side):
        """(max degree + lambda) / (min degree + lambda) on one side."""
        if side == "worker":
            return (self.dw_max + self.penalties.lambda_w) * self.m_w
        return (self.df_max + self.penalties.lambda_f) * self.m_f

    def floor(self, a, b):
        """1 - (a + b gamma) / (1 + gamma) epsilon, kept exact even when negative."""
        g = self.gamma
        return 1.0 - (a + b * g) / (1.0 + g) * self.epsilon

    def as_dict(self):
        return {
            "n": self.n,
            "p": self.p,
            **self.penalties.as_dict(),
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "delta_w_min": self.dw_min,
            "delta_w_max": self.dw_max,
            "delta_f_min": self.df_min,
            "delta_f_max": self.df_max,
            "M_w": self.m_w,
            "M_f": self.m_f,
            "M": self.m,
            "t": self.t,
            "chi_w": self.chi_w,
            "chi_f": self.chi_f,
            "applicable": self.applicable,
        }


def bound_t(network, penalties, epsilon):
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1), got {epsilon}")
    if network.n == 0:
        raise ConfigError("bound inputs need at least one worker")
    return BoundInputs(
        network.n,
        network.p,
        penalties,
        float(epsilon),
        network.delta_w_min,
        network.delta_w_max,
        network.delta_f_min,
        network.delta_f_max,
    )


def log_rule_penalties(n, p, nu):
    """lambda_w = lambda_f = 3 (1 + nu) ln(n + p) with epsilon = (n + p)^(-nu)."""
    if not 0.0 < nu < 1.0:
        raise ConfigError(f"nu must lie in (0, 1), got {nu}")
    lam = 3.0 * (1.0 + nu) * math.log(n + p)
    return RidgePenalties(lam, lam), float((n + p) ** (-nu))


# ---------------------------------------------------------------------------
# bound expressions
# ---------------------------------------------------------------------------
def _lam(bi, side):
    return bi.penalties.lambda_w if side == "worker" else bi.penalties.lambda_f


def _dmax(bi, side):
    return bi.dw_max if side == "worker" else bi.df_max


def _dmin(bi, side):
    return bi.dw_min if side == "worker" else bi.df_min


def _other(side):
    return "firm" if side == "worker" else "worker"


def normalized_adjacency_bound(bi):
    return 4.0 * bi.t


def laplacian_bound(bi):
    return 8.0 * bi.t


def centered_piece_bound(bi):
    return bi.t


def degree_piece_bound(bi):
    return 3.0 * bi.t


def inverse_laplacian_bound(bi, side):
    lam = _lam(bi, side)
    if lam <= 0:
        return math.inf
    return 16.0 * bi.t * ((_dmax(bi, side) + lam) / lam) ** 2


def inverse_schur_bound(bi, side):
    lam = _lam(bi, side)
    if lam <= 0:
        return math.inf
    return (5.0 + 16.0 * bi.ratio(side)) * (_dmax(bi, side) + lam) / lam**2 * bi.t


def _cross_term(bi, side):
    """sqrt(chi) + 2 sqrt((dmax + lambda) / lambda_other) for the worker side, with chi_f, and its mirror."""
    other = _other(side)
    chi = bi.chi_f if side == "worker" else bi.chi_w
    return math.sqrt(chi) + 2.0 * math.sqrt((_dmax(bi, side) + _lam(bi, side)) / _lam(bi, other))


def bias_bound(bi, side, mu_norm, phi_norm):
    """Bias gap bound, mu_norm and phi_norm being ||mu*|| and ||phi*||."""
    other = _other(side)
    lam, lam_o = _lam(bi, side), _lam(bi, other)
    if lam <= 0 or lam_o <= 0:
        return math.inf
    size = bi.n if side == "worker" else bi.p
    size_o = bi.p if side == "worker" else bi.n
    own, cross = (mu_norm, phi_norm) if side == "worker" else (phi_norm, mu_norm)
    top = _dmax(bi, side) + lam
    first = (5.0 + 16.0 * bi.ratio(side)) * top / lam**2 * bi.t
    first *= lam * math.sqrt(size) * own + lam_o * math.sqrt(top / (_dmin(bi, other) + lam_o)) * math.sqrt(size_o) * cross
    second = 2.0 * lam_o * top / lam**2 * _cross_term(bi, side) * bi.t * math.sqrt(size_o) * cross
    return first + second


def variance_bound(bi, side, sigma, sigma_w, sigma_f):
    """Three-term variance gap bound; the last bracket keeps chi_w on both sides."""
    other = _other(side)
    lam, lam_o = _lam(bi, side), _lam(bi, other)
    if lam <= 0 or lam_o <= 0:
        return math.inf
    s2 = sigma**2
    own_sd, other_sd = (sigma_w, sigma_f) if side == "worker" else (sigma_f, sigma_w)
    a = abs(lam**2 * own_sd**2 - lam * s2)
    b = abs(lam_o**2 * other_sd**2 - lam_o * s2)
    top = _dmax(bi, side) + lam
    low = _dmin(bi, side) + lam
    low_o = _dmin(bi, other) + lam_o
    factor = 5.0 + 16.0 * bi.ratio(side)
    first = s2 * factor * top / lam**2 * bi.t
    second = a * (2.0 / lam + 1.0 / low) * factor * top**2 / lam**3 * bi.t
    cross = math.sqrt((bi.df_max + bi.penalties.lambda_f) / bi.penalties.lambda_w)
    bracket = factor * math.sqrt(top / low_o) + 2.0 * (math.sqrt(bi.chi_w) + 2.0 * cross)
    third = b * (4.0 / lam * math.sqrt(1.0 / lam_o) + 1.0 / low * math.sqrt(1.0 / low_o)) * top**2.5 / lam**3 * bracket * bi.t
    return first + second + third


def sse_bias_gap_bound(dw_max, bias, expected_bias):
    """delta_w_max (||b|| + ||b_expected||) ||b - b_expected||, a deterministic bound on the SSE bias-term gap."""
    bias = np.asarray(bias, dtype=float)
    expected_bias = np.asarray(expected_bias, dtype=float)
    return float(dw_max * (np.linalg.norm(bias) + np.linalg.norm(expected_bias)) * np.linalg.norm(bias - expected_bias))


# entry name -> (a, b) of the probability floor 1 - (a + b gamma) / (1 + gamma) epsilon
FLOORS = {
    "normalized_adjacency": (3, 4),
    "laplacian_worker": (3, 4),
    "laplacian_firm": (3, 4),
    "centered_piece": (1, 0),
    "degree_piece": (2, 3),
    "inverse_laplacian_firm": (3, 5),
    "inverse_laplacian_worker": (4, 4),
    "inverse_schur_firm": (3, 9),
    "inverse_schur_worker": (8, 4),
    "bias_worker": (11, 7),
    "bias_firm": (6, 12),
    "variance_worker": (13, 6),
    "variance_firm": (5, 13),
}


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------
@dataclass
class BoundEntry:
    theorem: int
    name: str
    side: str
    floor: float
    applicable: bool
    deviations: list = field(default_factory=list)
    bounds: list = field(default_factory=list)
    replications: list = field(default_factory=list)
    excluded: int = 0

    @property
    def bound(self):
        return float(min(self.bounds)) if self.bounds else math.nan

    @property
    def n_used(self):
        return len(self.deviations)

    @property
    def violations(self):
        return int(sum(d > b for d, b in zip(self.deviations, self.bounds)))

    @property
    def violation_rate(self):
        return self.violations / self.n_used if self.n_used else 0.0

    @property
    def allowed_rate(self):
        return min(max(1.0 - self.floor, 0.0), 1.0)

    def within_floor(self, z=3.0):
        """violation_rate <= (1 - floor) + z binomial standard errors."""
        q = self.allowed_rate
        se = math.sqrt(q * (1.0 - q) / self.n_used) if self.n_used else 0.0
        return self.violation_rate <= (1.0 - self.floor) + z * se

    def as_dict(self):
        devs = np.asarray(self.deviations, dtype=float)
        return {
            "theorem": self.theorem,
            "name": self.name,
            "side": self.side,
            "bound": self.bound,
            "probability_floor": self.floor,
            "applicable": self.applicable,
            "replications": self.n_used,
            "excluded": self.excluded,
            "violation_rate": self.violation_rate,
            "max_deviation": float(devs.max()) if devs.size else math.nan,
            "median_deviation": float(np.median(devs)) if devs.size else math.nan,
        }


@dataclass
class BoundReport:
    inputs: BoundInputs
    entries: list = field(default_factory=list)

    @property
    def applicable(self):
        return self.inputs.applicable

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def for_theorem(self, theorem):
        return [e for e in self.entries if e.theorem == theorem]

    def rows(self):
        """One row per (entry, replication), for CSV output."""
        for e in self.entries:
            for r, dev, bnd in zip(e.replications, e.deviations, e.bounds):
                yield {"theorem": e.theorem, "name": e.name, "side": e.side, "replication": r, "deviation": dev, "bound": bnd}

    def summary(self):
        return {"inputs": self.inputs.as_dict(), "entries": [e.as_dict() for e in self.entries]}


# ---------------------------------------------------------------------------
# per-network measurements
# ---------------------------------------------------------------------------
def _rescaled(root, solve):
    """x -> R S^{-1} R x for a diagonal R given by its entries."""

    def apply(x):
        return rowscale(root, solve(rowscale(root, x)))

    return apply


def _symmetric_difference(size, left, right):
    def apply(x):
        return left(x) - right(x)

    return LinearOperator((size, size), matvec=apply, rmatvec=apply, matmat=apply, rmatmat=apply, dtype=float)


def _rectangular(shape, apply, apply_t):
    return LinearOperator(shape, matvec=apply, rmatvec=apply_t, matmat=apply, rmatmat=apply_t, dtype=float)


def _rectangular_difference(shape, left, left_t, right, right_t):
    return _rectangular(shape, lambda x: left(x) - right(x), lambda y: left_t(y) - right_t(y))


class _Check:
    """Everything the measurements share for one (assignment, penalties, epsilon)."""

    def __init__(self, params, assignment, penalties, epsilon, theorems, mu_star=None, phi_star=None, sigma=0.0, sigma_w=0.0, sigma_f=0.0):
        unknown = set(theorems) - set(THEOREMS)
        if unknown:
            raise ConfigError(f"unknown theorem numbers {sorted(unknown)}")
        if not penalties.positive:
            raise ConfigError("bound checks need lambda_w > 0 and lambda_f > 0")
        self.params = params
        self.assignment = assignment
        self.penalties = penalties
        self.theorems = tuple(sorted(set(theorems)))
        self.network = expected_network(assignment, params.affinity, penalties)
        self.inputs = bound_t(self.network, penalties, epsilon)
        K = assignment.K
        self.mu_star = np.zeros(K) if mu_star is None else np.asarray(mu_star, dtype=float)
        self.phi_star = np.zeros(K) if phi_star is None else np.asarray(phi_star, dtype=float)
        self.sigma, self.sigma_w, self.sigma_f = float(sigma), float(sigma_w), float(sigma_f)
        if 4 in self.theorems:
            self.mu_group = self.mu_star[assignment.worker_types]
            self.phi_group = self.phi_star[assignment.firm_types]
            self.expected_bias = bias_from_operators(self.network, self.mu_group, self.phi_group)
        if 5 in self.theorems:
            self.expected_variance = {side: variance_operator(self.network, side, sigma, sigma_w, sigma_f) for side in ("worker", "firm")}

    def norm(self, op):
        res = operator_norm(op, tol=POWER_TOL, max_iter=POWER_MAX_ITER)
        return res.value if res.converged else None

    def measure(self, g):
        """Deviation per entry name for one realized network; None marks a non-converged norm."""
        en, lam = self.network, self.penalties
        n, p = en.n, en.p
        out = {}
        solver = SchurSolver.from_graph(g, lam)

        if 1 in self.theorems:
            e = normalized_adjacency(g, lam)
            et = e.T.tocsr()
            out["normalized_adjacency"] = self.norm(_rectangular_difference((n, p), e.dot, et.dot, en.e_apply, en.e_t_apply))
            out["laplacian_worker"] = self.norm(_symmetric_difference(n, lambda x: e @ (et @ x), lambda x: en.e_apply(en.e_t_apply(x))))
            out["laplacian_firm"] = self.norm(_symmetric_difference(p, lambda x: et @ (e @ x), lambda x: en.e_t_apply(en.e_apply(x))))
            sw, sf = 1.0 / np.sqrt(en.dw_lambda), 1.0 / np.sqrt(en.df_lambda)
            b, bt = g.adjacency, g.adjacency_t

            def centered(x):
                return rowscale(sw, b @ rowscale(sf, x) - en.adjacency(rowscale(sf, x)))

            def centered_t(y):
                return rowscale(sf, bt @ rowscale(sw, y) - en.adjacency_t(rowscale(sw, y)))

            out["centered_piece"] = self.norm(_rectangular((n, p), centered, centered_t))

            def scaled(x):
                return rowscale(sw, b @ rowscale(sf, x))

            def scaled_t(y):
                return rowscale(sf, bt @ rowscale(sw, y))

            out["degree_piece"] = self.norm(_rectangular_difference((n, p), e.dot, et.dot, scaled, scaled_t))

        if 2 in self.theorems:
            rw, rf = np.sqrt(solver.dw_lambda), np.sqrt(solver.df_lambda)
            for side, size, root, schur in (("worker", n, rw, solver.worker_schur_solve), ("firm", p, rf, solver.firm_schur_solve)):
                realized = _rescaled(root, schur)
                out[f"inverse_laplacian_{side}"] = self.norm(_symmetric_difference(size, realized, partial(en.laplacian_inverse_apply, side)))

        if 3 in self.theorems:
            for side, size, schur in (("worker", n, solver.worker_schur_solve), ("firm", p, solver.firm_schur_solve)):
                out[f"inverse_schur_{side}"] = self.norm(_symmetric_difference(size, schur, partial(en.schur_inverse_apply, side)))

        if 4 in self.theorems:
            b_mu, b_phi = bias_from_operators(solver, self.mu_group, self.phi_group)
            eb_mu, eb_phi = self.expected_bias
            out["bias_worker"] = float(np.linalg.norm(b_mu - eb_mu))
            out["bias_firm"] = float(np.linalg.norm(b_phi - eb_phi))
            dw = en.expected_worker_degrees
            gap = abs(float(b_mu @ (dw * b_mu) - eb_mu @ (dw * eb_mu)))
            out["sse_bias_gap"] = (gap, sse_bias_gap_bound(en.delta_w_max, b_mu, eb_mu))

        if 5 in self.theorems:
            for side, size in (("worker", n), ("firm", p)):
                realized = variance_operator(solver, side, self.sigma, self.sigma_w, self.sigma_f)
                out[f"variance_{side}"] = self.norm(_symmetric_difference(size, realized.dot, self.expected_variance[side].dot))
        return out

    def entry_specs(self):
        """(theorem, name, side, bound, floor) for every entry this check produces."""
        bi = self.inputs
        specs = []
        if 1 in self.theorems:
            specs += [
                (1, "normalized_adjacency", "both", normalized_adjacency_bound(bi)),
                (1, "laplacian_worker", "worker", laplacian_bound(bi)),
                (1, "laplacian_firm", "firm", laplacian_bound(bi)),
                (1, "centered_piece", "both", centered_piece_bound(bi)),
                (1, "degree_piece", "both", degree_piece_bound(bi)),
            ]
        for side in ("worker", "firm"):
            if 2 in self.theorems:
                specs.append((2, f"inverse_laplacian_{side}", side, inverse_laplacian_bound(bi, side)))
            if 3 in self.theorems:
                specs.append((3, f"inverse_schur_{side}", side, inverse_schur_bound(bi, side)))
            if 4 in self.theorems:
                mu_norm, phi_norm = float(np.linalg.norm(self.mu_star)), float(np.linalg.norm(self.phi_star))
                specs.append((4, f"bias_{side}", side, bias_bound(bi, side, mu_norm, phi_norm)))
            if 5 in self.theorems:
                specs.append((5, f"variance_{side}", side, variance_bound(bi, side, self.sigma, self.sigma_w, self.sigma_f)))
        out = [(th, name, side, bound, bi.floor(*FLOORS[name])) for th, name, side, bound in specs]
        if 1 in self.theorems:
            out += [(1, f"laplacian_{side}_vs_adjacency", side, None, 1.0) for side in ("worker", "firm")]
        if 4 in self.theorems:
            out.append((4, "sse_bias_gap", "worker", None, 1.0))
        return out


def _collect(check, measurements):
    entries = []
    applicable = check.inputs.applicable
    for theorem, name, side, bound, floor in check.entry_specs():
        entry = BoundEntry(theorem, name, side, floor, applicable)
        for r, values in enumerate(measurements):
            if name.endswith("_vs_adjacency"):
                lap, adj = values.get(name.replace("_vs_adjacency", "")), values.get("normalized_adjacency")
                value, rep_bound = lap, None if adj is None else 2.0 * adj * (1.0 + IDENTITY_SLACK)
            elif name == "sse_bias_gap":
                value, rep_bound = values[name]
            else:
                value, rep_bound = values[name], bound
            if value is None or rep_bound is None:
                entry.excluded += 1
                continue
            entry.replications.append(r)
            entry.deviations.append(float(value))
            entry.bounds.append(float(rep_bound))
        if entry.excluded:
            log.warning("%s: %d replications excluded after power iteration did not converge", name, entry.excluded)
        entries.append(entry)
    return entries


def run_bounds(
    params,
    penalties,
    epsilon,
    replications,
    theorems=THEOREMS,
    mu_star=None,
    phi_star=None,
    sigma=0.0,
    sigma_w=0.0,
    sigma_f=0.0,
    rng=None,
    assignment=None,
    workers=1,
    progress=None,
):
    """Run the selected checks on ``replications`` shared network draws.

    The assignment is drawn once; network r comes from the stream
    ("bounds", r). ``progress`` is called once per finished replication.
    """
    rng = rng if rng is not None else RngStreams(params.seed)
    assignment = assignment if assignment is not None else draw_assignment(params, rng)
    check = _Check(params, assignment, penalties, epsilon, theorems, mu_star, phi_star, sigma, sigma_w, sigma_f)
    if not check.inputs.applicable:
        log.warning("bound conditions do not hold (t=%.4f > 1); results are advisory", check.inputs.t)

    def one(r):
        values = check.measure(sample_edges(assignment, params.affinity, rng, "bounds", r))
        if progress is not None:
            progress()
        return values

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            measurements = list(pool.map(one, range(replications)))
    else:
        measurements = [one(r) for r in range(replications)]
    report = BoundReport(check.inputs, _collect(check, measurements))
    log.info("bounds: %d replications, theorems %s, t=%.4f", replications, check.theorems, check.inputs.t)
    return report


def theorem1_check(params, penalties, epsilon, replications, **kwargs):
    return run_bounds(params, penalties, epsilon, replications, theorems=(1,), **kwargs)


def theorem2_check(params, penalties, epsilon, replications, **kwargs):
    return run_bounds(params, penalties, epsilon, replications, theorems=(2,), **kwargs)


def theorem3_check(params, penalties, epsilon, replications, **kwargs):
    return run_bounds(params, penalties, epsilon, replications, theorems=(3,), **kwargs)


def theorem4_check(params, penalties, epsilon, mu_star, phi_star, replications, **kwargs):
    return run_bounds(params, penalties, epsilon, replications, theorems=(4,), mu_star=mu_star, phi_star=phi_star, **kwargs)


def theorem5_check(params, penalties, epsilon, sigma, sigma_w, sigma_f, replications, **kwargs):
    return run_bounds(params, penalties, epsilon, replications, theorems=(5,), sigma=sigma, sigma_w=sigma_w, sigma_f=sigma_f, **kwargs)
