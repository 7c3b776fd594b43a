"""
Ridge and OLS two-way fixed-effect estimation
---------------------------------------------------------------------------

The model is y_ijs = mu_i + phi_j + u_ijs. With X = (W, F) the normal
equations read

    [[D_{w,lambda}, B], [B^T, D_{f,lambda}]] (mu, phi) = (W^T y, F^T y),

and every solve here eliminates mu and goes through the firm-side Schur
system. Bias and variance formulas are written once against the
``NetworkOperators`` protocol, so they evaluate on the realized network
(``SchurSolver``) and on the expected network (``ExpectedNetwork``) alike.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Protocol

import numpy as np
import pandas as pd
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator

from ridge_twfe.errors import EstimationError, SolverError
from ridge_twfe.graph import DENSE_CAP, ZERO_PENALTIES, BipartiteGraph, RidgePenalties, connected_components, graph_from_arrays, rowscale
from ridge_twfe.rng import RngStreams
from ridge_twfe.solvers import SchurSolver

log = logging.getLogger(__name__)

NORMAL_EQUATION_RTOL = 1e-8
COLUMN_BATCH = 256
HUTCHINSON_PROBES = 64


class NetworkOperators(Protocol):
    n: int
    p: int
    penalties: RidgePenalties
    dw_lambda: np.ndarray
    df_lambda: np.ndarray

    def adjacency(self, x): ...

    def adjacency_t(self, y): ...

    def firm_schur_solve(self, y): ...

    def worker_schur_solve(self, x): ...


@dataclass(frozen=True, eq=False)
class OutcomePanel:
    """Outcomes in canonical order: edges sorted by (firm, worker), each repeated d_ij times."""

    graph: BipartiteGraph
    y: np.ndarray
    worker_ids: Optional[np.ndarray] = None
    firm_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        if y.size != self.graph.n_obs:
            raise EstimationError(f"outcome vector has {y.size} rows but the graph has N={self.graph.n_obs}")
        object.__setattr__(self, "y", y)
        if self.worker_ids is None:
            object.__setattr__(self, "worker_ids", np.arange(self.graph.n_workers))
        if self.firm_ids is None:
            object.__setattr__(self, "firm_ids", np.arange(self.graph.n_firms))

    @property
    def n_obs(self):
        return self.graph.n_obs

    @cached_property
    def obs_worker(self):
        return np.repeat(self.graph.workers, self.graph.mult)

    @cached_property
    def obs_firm(self):
        return np.repeat(self.graph.firms, self.graph.mult)

    @cached_property
    def worker_design(self):
        """W as an (N, n) sparse indicator matrix."""
        big_n = self.n_obs
        return sps.csr_matrix((np.ones(big_n), (np.arange(big_n), self.obs_worker)), shape=(big_n, self.graph.n_workers))

    @cached_property
    def firm_design(self):
        big_n = self.n_obs
        return sps.csr_matrix((np.ones(big_n), (np.arange(big_n), self.obs_firm)), shape=(big_n, self.graph.n_firms))

    def worker_sums(self, y=None):
        return self.worker_design.T @ (self.y if y is None else y)

    def firm_sums(self, y=None):
        return self.firm_design.T @ (self.y if y is None else y)

    def with_y(self, y):
        return replace(self, y=y)

    def to_frame(self):
        return pd.DataFrame({"worker_id": self.worker_ids[self.obs_worker], "firm_id": self.firm_ids[self.obs_firm], "y": self.y})


def panel_from_observations(worker_ids, firm_ids, y):
    """Canonical panel from raw observation rows with arbitrary identifiers."""
    w_codes, w_uniques = pd.factorize(pd.Series(worker_ids), sort=True)
    f_codes, f_uniques = pd.factorize(pd.Series(firm_ids), sort=True)
    y = np.asarray(y, dtype=float).ravel()
    if not (w_codes.size == f_codes.size == y.size):
        raise EstimationError("worker_ids, firm_ids and y differ in length")
    if np.any(w_codes < 0) or np.any(f_codes < 0):
        raise EstimationError("missing worker or firm identifiers")
    g = graph_from_arrays(w_codes, f_codes, np.ones(y.size, np.int64), w_uniques.size, f_uniques.size)
    order = np.lexsort((w_codes, f_codes))
    return OutcomePanel(g, y[order], np.asarray(w_uniques), np.asarray(f_uniques))


def restrict_panel(panel, mapping):
    """Observations whose worker and firm both survive ``mapping``."""
    g = panel.graph
    new_w = mapping.worker_old_to_new(g.n_workers)[panel.obs_worker]
    new_f = mapping.firm_old_to_new(g.n_firms)[panel.obs_firm]
    keep = (new_w >= 0) & (new_f >= 0)
    sub = graph_from_arrays(new_w[keep], new_f[keep], np.ones(int(keep.sum()), np.int64), mapping.workers.size, mapping.firms.size)
    return OutcomePanel(sub, panel.y[keep], panel.worker_ids[mapping.workers], panel.firm_ids[mapping.firms])


@dataclass(frozen=True, eq=False)
class FixedEffectDgp:
    """Group means, dispersion parameters and one realized draw of the effects."""

    mu_star: np.ndarray
    phi_star: np.ndarray
    sigma: float
    sigma_w: float
    sigma_f: float
    mu: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        if min(self.sigma, self.sigma_w, self.sigma_f) < 0:
            raise EstimationError("standard deviations must be nonnegative")

    @classmethod
    def draw(cls, assignment, mu_star, phi_star, sigma, sigma_w, sigma_f, rng):
        mu_star = np.asarray(mu_star, dtype=float)
        phi_star = np.asarray(phi_star, dtype=float)
        if mu_star.shape != (assignment.K,) or phi_star.shape != (assignment.K,):
            raise EstimationError(f"group means must have length K={assignment.K}")
        mu = mu_star[assignment.worker_types] + sigma_w * rng.standard_normal(assignment.n)
        phi = phi_star[assignment.firm_types] + sigma_f * rng.standard_normal(assignment.p)
        return cls(mu_star, phi_star, float(sigma), float(sigma_w), float(sigma_f), mu, phi)

    def restrict(self, worker_index, firm_index):
        return replace(self, mu=self.mu[worker_index], phi=self.phi[firm_index])


def design_effect_params(K):
    """mu_i = (k_i - 1) + sqrt(2) N(0,1), phi_j = 0.4 (l_j - 1) + N(0,1), residual sd 2."""
    return {
        "mu_star": np.arange(K, dtype=float),
        "phi_star": 0.4 * np.arange(K, dtype=float),
        "sigma": 2.0,
        "sigma_w": float(np.sqrt(2.0)),
        "sigma_f": 1.0,
    }


def generate_outcomes(g, dgp, rng, worker_ids=None, firm_ids=None):
    if dgp.mu.size != g.n_workers or dgp.phi.size != g.n_firms:
        raise EstimationError("effects do not cover the graph's nodes; restrict the DGP to the graph first")
    panel = OutcomePanel(g, np.zeros(g.n_obs), worker_ids, firm_ids)
    noise = dgp.sigma * rng.standard_normal(g.n_obs)
    return panel.with_y(dgp.mu[panel.obs_worker] + dgp.phi[panel.obs_firm] + noise)


@dataclass(frozen=True)
class SolverInfo:
    method: str
    iterations: int = 0
    fill: int = 0
    residual_norm: float = 0.0
    relative_residual: float = 0.0
    pinned_firm: Optional[int] = None

    def as_dict(self):
        return {
            "method": self.method,
            "iterations": self.iterations,
            "fill": self.fill,
            "residual_norm": self.residual_norm,
            "relative_residual": self.relative_residual,
            "pinned_firm": self.pinned_firm,
        }


@dataclass(frozen=True, eq=False)
class RidgeFit:
    mu_hat: np.ndarray
    phi_hat: np.ndarray
    penalties: RidgePenalties
    residuals: np.ndarray
    solver_info: SolverInfo
    worker_ids: np.ndarray = field(default=None)
    firm_ids: np.ndarray = field(default=None)
    estimator: str = "ridge"

    @classmethod
    def from_effects(cls, panel, mu, phi, estimator="true"):
        mu = np.asarray(mu, dtype=float)
        phi = np.asarray(phi, dtype=float)
        residuals = panel.y - mu[panel.obs_worker] - phi[panel.obs_firm]
        return cls(mu, phi, ZERO_PENALTIES, residuals, SolverInfo("none"), panel.worker_ids, panel.firm_ids, estimator)

    def fitted(self, panel):
        return self.mu_hat[panel.obs_worker] + self.phi_hat[panel.obs_firm]

    def to_frame(self):
        return pd.concat(
            [
                pd.DataFrame({"node_kind": "worker", "node_id": self.worker_ids, "effect_estimate": self.mu_hat}),
                pd.DataFrame({"node_kind": "firm", "node_id": self.firm_ids, "effect_estimate": self.phi_hat}),
            ],
            ignore_index=True,
        )


def hessian_solve(ops, x, y):
    """Solve [[D_w, B], [B^T, D_f]] (u, v) = (x, y) with one firm-side Schur solve."""
    x_scaled = rowscale(1.0 / ops.dw_lambda, x)
    v = ops.firm_schur_solve(y - ops.adjacency_t(x_scaled))
    u = x_scaled - rowscale(1.0 / ops.dw_lambda, ops.adjacency(v))
    return u, v


def hessian_apply(ops, u, v):
    return rowscale(ops.dw_lambda, u) + ops.adjacency(v), ops.adjacency_t(u) + rowscale(ops.df_lambda, v)


class RidgeSolver:
    """One factorization of the normal equations, reusable for many outcome vectors.

    With ``pin_firm`` set, that firm's effect is fixed at zero and its
    column removed, which is the OLS normalization for a connected graph.
    """

    def __init__(self, graph, penalties, method="auto", pin_firm=None):
        self.graph = graph
        self.penalties = penalties
        self.pin_firm = pin_firm
        if pin_firm is None:
            self.free_firms = np.arange(graph.n_firms)
            self.ops = SchurSolver.from_graph(graph, penalties, method=method)
        else:
            self.free_firms = np.delete(np.arange(graph.n_firms), pin_firm)
            free = self.free_firms
            self.ops = SchurSolver(graph.adjacency[:, free], penalties, graph.worker_degrees, graph.firm_degrees[free], method=method)

    def _expand(self, v):
        if self.pin_firm is None:
            return v
        full = np.zeros((self.graph.n_firms,) + v.shape[1:])
        full[self.free_firms] = v
        return full

    def solve_normal_equations(self, r_w, r_f):
        r_f = r_f[self.free_firms]
        mu, phi = hessian_solve(self.ops, r_w, r_f)
        norm_rhs = float(np.sqrt(np.sum(r_w**2) + np.sum(r_f**2)))
        res_w, res_f = hessian_apply(self.ops, mu, phi)
        res_w, res_f = res_w - r_w, res_f - r_f
        residual = float(np.sqrt(np.sum(res_w**2) + np.sum(res_f**2)))
        scale = norm_rhs if norm_rhs > 0 else 1.0
        if residual > NORMAL_EQUATION_RTOL * scale:
            du, dv = hessian_solve(self.ops, res_w, res_f)
            mu, phi = mu - du, phi - dv
            res_w, res_f = hessian_apply(self.ops, mu, phi)
            residual = float(np.sqrt(np.sum((res_w - r_w) ** 2) + np.sum((res_f - r_f) ** 2)))
            log.debug("normal equations refined once, residual %.3e", residual)
            if residual > NORMAL_EQUATION_RTOL * scale:
                raise SolverError("normal-equation residual above tolerance", residual_norm=residual, method=self.ops.method)
        return mu, self._expand(phi), residual, residual / scale

    def fit(self, panel, estimator=None):
        mu, phi, residual, relative = self.solve_normal_equations(panel.worker_sums(), panel.firm_sums())
        factor = self.ops.factor
        info = SolverInfo(factor.method, factor.iterations, factor.fill, residual, relative, self.pin_firm)
        name = estimator or ("ols" if self.pin_firm is not None else "ridge")
        residuals = panel.y - mu[panel.obs_worker] - phi[panel.obs_firm]
        return RidgeFit(mu, phi, self.penalties, residuals, info, panel.worker_ids, panel.firm_ids, name)

    def fit_many(self, panel, outcomes):
        """Effects for each column of an (N, R) outcome matrix."""
        r_w = panel.worker_design.T @ outcomes
        r_f = panel.firm_design.T @ outcomes
        mu, phi = hessian_solve(self.ops, r_w, r_f[self.free_firms])
        return mu, self._expand(phi)


def ridge_fit(panel, penalties, method="auto"):
    if not penalties.positive:
        raise EstimationError("ridge_fit needs lambda_w > 0 and lambda_f > 0; use ols_fit for the unpenalized estimator")
    fit = RidgeSolver(panel.graph, penalties, method=method).fit(panel)
    info = fit.solver_info
    log.debug("ridge fit lambda=(%g, %g): %s residual %.3e", penalties.lambda_w, penalties.lambda_f, info.method, info.residual_norm)
    return fit


def require_connected(g):
    if g.n_obs == 0:
        raise EstimationError("OLS needs at least one observation")
    labeling = connected_components(g)
    if labeling.n_components != 1:
        sizes = labeling.component_sizes
        listing = ", ".join(f"#{c}: n={w} p={f} N={o}" for c, (w, f, o) in enumerate(sizes[:10].tolist()))
        more = "" if labeling.n_components <= 10 else f", ... ({labeling.n_components} in total)"
        raise EstimationError(f"OLS needs a connected graph without isolated nodes; found components {listing}{more}")
    return labeling


def ols_fit(panel, pin_firm=0, method="auto"):
    """OLS with one firm effect pinned to zero (the lowest index by default)."""
    require_connected(panel.graph)
    fit = RidgeSolver(panel.graph, ZERO_PENALTIES, method=method, pin_firm=pin_firm).fit(panel, estimator="ols")
    log.debug("OLS fit pinned firm %d: residual %.3e", pin_firm, fit.solver_info.residual_norm)
    return fit


# ---------------------------------------------------------------------------
# bias
# ---------------------------------------------------------------------------
def bias_from_operators(ops, mu, phi):
    """E(beta_hat - beta) = -H^{-1} Lambda beta for fixed effects (mu, phi)."""
    lam = ops.penalties
    u, v = hessian_solve(ops, lam.lambda_w * np.asarray(mu, dtype=float), lam.lambda_f * np.asarray(phi, dtype=float))
    return -u, -v


def _require_positive(penalties):
    if not penalties.positive:
        raise EstimationError("bias and variance formulas need lambda_w > 0 and lambda_f > 0")


def insample_bias(g, penalties, mu, phi, ops=None):
    _require_positive(penalties)
    ops = ops if ops is not None else SchurSolver.from_graph(g, penalties)
    return bias_from_operators(ops, mu, phi)


def _network_at(network, penalties):
    if penalties is None or penalties == network.penalties:
        return network
    return network.with_penalties(penalties)


def deterministic_bias(network, penalties, mu_star, phi_star):
    network = _network_at(network, penalties)
    _require_positive(network.penalties)
    a = network.assignment
    return bias_from_operators(network, np.asarray(mu_star, dtype=float)[a.worker_types], np.asarray(phi_star, dtype=float)[a.firm_types])


# ---------------------------------------------------------------------------
# variance
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class MomentReport:
    var_mu_diag: np.ndarray
    var_phi_diag: np.ndarray
    penalties: RidgePenalties
    deterministic: bool = False
    var_mu: Optional[np.ndarray] = None
    var_phi: Optional[np.ndarray] = None
    cov_mu_phi: Optional[np.ndarray] = None
    bias_mu: Optional[np.ndarray] = None
    bias_phi: Optional[np.ndarray] = None

    @property
    def full(self):
        return self.var_mu is not None

    def with_bias(self, bias_mu, bias_phi):
        return replace(self, bias_mu=bias_mu, bias_phi=bias_phi)


def _variance_coefficients(penalties, sigma, sigma_w, sigma_f):
    sigma2 = float(sigma) ** 2
    a = penalties.lambda_w**2 * sigma_w**2 - penalties.lambda_w * sigma2
    b = penalties.lambda_f**2 * sigma_f**2 - penalties.lambda_f * sigma2
    return sigma2, a, b


def _variance_block(ops, side, x, sigma2, a, b):
    """(sigma^2 H^{-1} + H^{-1} diag(a I, b I) H^{-1}) applied to x placed on one side, as (worker rows, firm rows)."""
    zeros_w = np.zeros((ops.n,) + x.shape[1:])
    zeros_f = np.zeros((ops.p,) + x.shape[1:])
    u, v = hessian_solve(ops, x, zeros_f) if side == "worker" else hessian_solve(ops, zeros_w, x)
    u2, v2 = hessian_solve(ops, a * u, b * v)
    return sigma2 * u + u2, sigma2 * v + v2


def _variance_columns(ops, side, cols, sigma2, a, b):
    size = ops.n if side == "worker" else ops.p
    unit = np.zeros((size, cols.size))
    unit[cols, np.arange(cols.size)] = 1.0
    return _variance_block(ops, side, unit, sigma2, a, b)


def variance_operator(ops, side, sigma, sigma_w=0.0, sigma_f=0.0):
    """V_w (or V_f) as a symmetric ``LinearOperator``, never formed."""
    sigma2, a, b = _variance_coefficients(ops.penalties, sigma, sigma_w, sigma_f)
    size = ops.n if side == "worker" else ops.p
    pick = 0 if side == "worker" else 1

    def apply(x):
        return _variance_block(ops, side, x, sigma2, a, b)[pick]

    return LinearOperator((size, size), matvec=apply, rmatvec=apply, matmat=apply, rmatmat=apply, dtype=float)


def variance_from_operators(ops, sigma, sigma_w=0.0, sigma_f=0.0, full=None, cap=DENSE_CAP, deterministic=False):
    """Variance of (mu_hat - mu, phi_hat - phi) with random effects of sd (sigma_w, sigma_f).

    With sigma_w = sigma_f = 0 this is the fixed-effect sampling variance.
    Full matrices are built when ``full`` is true (default: when
    max(n, p) <= cap); otherwise only the diagonals, column batch by
    column batch.
    """
    lam = ops.penalties
    _require_positive(lam)
    n, p = ops.n, ops.p
    if full is None:
        full = max(n, p) <= cap
    elif full and max(n, p) > cap:
        raise EstimationError(f"full variance matrices requested for max(n, p)={max(n, p)} above the dense cap {cap}")
    sigma2, a, b = _variance_coefficients(lam, sigma, sigma_w, sigma_f)

    var_mu = np.zeros((n, n)) if full else None
    var_phi = np.zeros((p, p)) if full else None
    cov = np.zeros((n, p)) if full else None
    diag_mu, diag_phi = np.zeros(n), np.zeros(p)
    for start in range(0, n, COLUMN_BATCH):
        cols = np.arange(start, min(start + COLUMN_BATCH, n))
        w_rows, f_rows = _variance_columns(ops, "worker", cols, sigma2, a, b)
        diag_mu[cols] = w_rows[cols, np.arange(cols.size)]
        if full:
            var_mu[:, cols] = w_rows
            cov[cols, :] = f_rows.T
    for start in range(0, p, COLUMN_BATCH):
        cols = np.arange(start, min(start + COLUMN_BATCH, p))
        _, f_rows = _variance_columns(ops, "firm", cols, sigma2, a, b)
        diag_phi[cols] = f_rows[cols, np.arange(cols.size)]
        if full:
            var_phi[:, cols] = f_rows
    if full:
        var_mu = 0.5 * (var_mu + var_mu.T)
        var_phi = 0.5 * (var_phi + var_phi.T)
    return MomentReport(diag_mu, diag_phi, lam, deterministic, var_mu, var_phi, cov)


def insample_variance(g, penalties, sigma, full=None, cap=DENSE_CAP, ops=None):
    _require_positive(penalties)
    ops = ops if ops is not None else SchurSolver.from_graph(g, penalties)
    return variance_from_operators(ops, sigma, 0.0, 0.0, full=full, cap=cap)


def random_beta_variance(g, penalties, sigma, sigma_w, sigma_f, full=None, cap=DENSE_CAP, ops=None):
    _require_positive(penalties)
    ops = ops if ops is not None else SchurSolver.from_graph(g, penalties)
    return variance_from_operators(ops, sigma, sigma_w, sigma_f, full=full, cap=cap)


def deterministic_variance(network, penalties, sigma, sigma_w, sigma_f, full=None, cap=DENSE_CAP):
    network = _network_at(network, penalties)
    return variance_from_operators(network, sigma, sigma_w, sigma_f, full=full, cap=cap, deterministic=True)


# ---------------------------------------------------------------------------
# bias-corrected variance components for OLS
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DebiasedQuadratics:
    sigma2_hat: float
    total_variance: float
    plug_in: dict
    traces: dict
    corrected: dict
    exact_traces: bool


def _schur_diag_trace(solver, weights, cap, probes, seed):
    """tr(diag(weights) S^{-1}), exact below the cap and by Rademacher probing above it."""
    size = weights.size
    if size == 0:
        return 0.0, True
    if size <= cap:
        total = 0.0
        for start in range(0, size, COLUMN_BATCH):
            cols = np.arange(start, min(start + COLUMN_BATCH, size))
            unit = np.zeros((size, cols.size))
            unit[cols, np.arange(cols.size)] = 1.0
            block = solver.firm_schur_solve(unit)
            total += float(np.sum(weights[cols] * block[cols, np.arange(cols.size)]))
        return total, True
    z = RngStreams(seed).stream("hutchinson").choice(np.array([-1.0, 1.0]), size=(size, probes))
    x = solver.firm_schur_solve(z)
    return float(np.mean(np.sum(z * rowscale(weights, x), axis=0))), False


def debiased_quadratics(panel, fit, cap=DENSE_CAP, probes=HUTCHINSON_PROBES, seed=0):
    """Homoscedastic bias correction of the OLS variance components.

    Each component is a quadratic form beta' Q beta in the effects; its
    plug-in value exceeds the truth by sigma^2 tr(Q S) in expectation,
    where S is the pinned-OLS covariance factor. All three traces reduce
    to tr(D_f S_r^{-1}) and d_f' S_r^{-1} d_f on the free firms.
    """
    pin = fit.solver_info.pinned_firm
    if pin is None:
        raise EstimationError("debiased components need an OLS fit with a pinned firm")
    g = panel.graph
    require_connected(g)
    n, p, big_n = g.n_workers, g.n_firms, g.n_obs
    dof = big_n - (n + p - 1)
    if dof <= 0:
        raise EstimationError(f"no residual degrees of freedom (N={big_n}, parameters={n + p - 1})")
    sigma2_hat = float(np.sum(fit.residuals**2) / dof)

    wm = fit.mu_hat[panel.obs_worker]
    fp = fit.phi_hat[panel.obs_firm]
    plug_in = {
        "var_worker": float(np.var(wm)),
        "var_firm": float(np.var(fp)),
        "cov": float(np.mean((wm - wm.mean()) * (fp - fp.mean()))),
    }

    free = np.delete(np.arange(p), pin)
    d_fr = g.firm_degrees[free].astype(float)
    solver = SchurSolver(g.adjacency[:, free], ZERO_PENALTIES, g.worker_degrees, d_fr)
    t_d, exact = _schur_diag_trace(solver, d_fr, cap, probes, seed)
    q = float(d_fr @ solver.firm_schur_solve(d_fr)) if d_fr.size else 0.0
    t_a = t_d - (p - 1)
    traces = {
        "var_worker": (n + t_a - (big_n + q) / big_n) / big_n,
        "var_firm": (t_d - q / big_n) / big_n,
        "cov": (-t_a + q / big_n) / big_n,
    }
    corrected = {key: plug_in[key] - sigma2_hat * traces[key] for key in plug_in}
    log.debug("debiased components: sigma2_hat=%.4f traces=%s exact=%s", sigma2_hat, traces, exact)
    return DebiasedQuadratics(sigma2_hat, float(np.var(panel.y)), plug_in, traces, corrected, exact)
