"""
Variance decompositions, prediction error and cross-validation
---------------------------------------------------------------------------

Shares use population (1/N) moments over the N observation rows:

    Var(y) = Var(W mu) + Var(F phi) + 2 Cov(W mu, F phi) + remainder.

The remainder is reported as the residual share, since ridge residuals
are not orthogonal to the fitted effects.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import gaussian_kde

from ridge_twfe.errors import ConfigError, DecompositionError, EstimationError
from ridge_twfe.estimator import (
    OutcomePanel,
    RidgeFit,
    RidgeSolver,
    bias_from_operators,
    generate_outcomes,
    restrict_panel,
    ridge_fit,
    variance_from_operators,
)
from ridge_twfe.graph import DENSE_CAP, RidgePenalties, largest_component
from ridge_twfe.sbm import expected_network, sample_edges

log = logging.getLogger(__name__)

DENSITY_POINTS = 512
SSE_BATCH = 256


@dataclass(frozen=True)
class VarianceDecomposition:
    share_worker: float
    share_firm: float
    share_2cov: float
    share_residual: float
    fe_correlation: Optional[float]
    total_variance: float

    def as_row(self, estimator, oos_mse=None, lw_norm=None, lf_norm=None):
        return {
            "estimator": estimator,
            "share_worker": self.share_worker,
            "share_firm": self.share_firm,
            "share_2cov": self.share_2cov,
            "share_residual": self.share_residual,
            "fe_corr": self.fe_correlation,
            "oos_mse": oos_mse,
            "lw_norm": lw_norm,
            "lf_norm": lf_norm,
        }


def _total_variance(panel):
    total = float(np.var(panel.y))
    if not total > 0:
        raise DecompositionError("outcome has zero variance; shares are undefined")
    return total


def decompose(panel, fit):
    if fit.mu_hat.size != panel.graph.n_workers or fit.phi_hat.size != panel.graph.n_firms:
        raise DecompositionError("fit does not cover the panel's nodes")
    total = _total_variance(panel)
    wm = fit.mu_hat[panel.obs_worker]
    fp = fit.phi_hat[panel.obs_firm]
    var_w, var_f = float(np.var(wm)), float(np.var(fp))
    cov = float(np.mean((wm - wm.mean()) * (fp - fp.mean())))
    corr = 0.0
    if var_w > 0 and var_f > 0:
        corr = float(np.clip(cov / np.sqrt(var_w * var_f), -1.0, 1.0))
    shares = (var_w / total, var_f / total, 2.0 * cov / total)
    return VarianceDecomposition(*shares, 1.0 - sum(shares), corr, total)


def decompose_effects(panel, mu, phi):
    return decompose(panel, RidgeFit.from_effects(panel, mu, phi))


def decompose_debiased(panel, quadratics):
    """Shares from bias-corrected quadratic forms; the correlation is left empty."""
    total = quadratics.total_variance if quadratics.total_variance > 0 else _total_variance(panel)
    c = quadratics.corrected
    shares = (c["var_worker"] / total, c["var_firm"] / total, 2.0 * c["cov"] / total)
    return VarianceDecomposition(*shares, 1.0 - sum(shares), None, total)


def degree_normalized(panel, penalties):
    """(lambda_w / (N/n), lambda_f / (N/p)) for the panel's graph."""
    g = panel.graph
    big_n = g.n_obs
    return penalties.lambda_w / (big_n / g.n_workers), penalties.lambda_f / (big_n / g.n_firms)


# ---------------------------------------------------------------------------
# out-of-sample error
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class OosResult:
    mse: float
    n_used: int
    n_dropped: int

    @property
    def dropped_fraction(self):
        total = self.n_used + self.n_dropped
        return self.n_dropped / total if total else 0.0


def out_of_sample_mse(fit, test_panel):
    """MSE over test rows whose worker and firm both appear in the fit, matched by node id."""
    w_index = pd.Index(fit.worker_ids).get_indexer(test_panel.worker_ids)[test_panel.obs_worker]
    f_index = pd.Index(fit.firm_ids).get_indexer(test_panel.firm_ids)[test_panel.obs_firm]
    usable = (w_index >= 0) & (f_index >= 0)
    n_used = int(usable.sum())
    n_dropped = int(usable.size - n_used)
    if n_used == 0:
        raise DecompositionError("no test observation has both its worker and its firm in the training fit")
    if n_dropped:
        log.warning("dropped %d of %d test observations with unseen nodes", n_dropped, usable.size)
    err = test_panel.y[usable] - fit.mu_hat[w_index[usable]] - fit.phi_hat[f_index[usable]]
    return OosResult(float(np.mean(err**2)), n_used, n_dropped)


def make_test_panel(params, assignment, dgp, rng, draw=0):
    """Fresh network and residuals on the training nodes, effects and types; largest component kept.

    Node ids are indices into the full assignment, as in the training panel.
    """
    g = sample_edges(assignment, params.affinity, rng, "test", draw)
    panel = generate_outcomes(g, dgp, rng.stream("test_noise", draw))
    selection = largest_component(g)
    test = restrict_panel(panel, selection.mapping)
    log.debug("test draw %d: n=%d p=%d N=%d", draw, test.graph.n_workers, test.graph.n_firms, test.n_obs)
    return test


def node_overlap(train_panel, test_panel):
    """Fractions of test workers and firms present in the training panel."""
    w = np.isin(test_panel.worker_ids, train_panel.worker_ids)
    f = np.isin(test_panel.firm_ids, train_panel.firm_ids)
    return float(w.mean()) if w.size else 0.0, float(f.mean()) if f.size else 0.0


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CvResult:
    grid: list
    mse: list
    best: RidgePenalties
    best_mse: float
    normalized: tuple

    def rows(self):
        for pen, mse in zip(self.grid, self.mse):
            yield {"lambda_w": pen.lambda_w, "lambda_f": pen.lambda_f, "oos_mse": mse}


def log_grid(lo, hi, num):
    if not 0 < lo <= hi or num < 1:
        raise ConfigError(f"log grid needs 0 < lo <= hi and num >= 1, got ({lo}, {hi}, {num})")
    return np.geomspace(lo, hi, num)


def penalty_grid(values_w, values_f):
    return [RidgePenalties(lw, lf) for lw in values_w for lf in values_f]


def degree_grid(panel, ratios_w, ratios_f):
    """Grid on the degree-normalized scale: lambda_w = r_w N/n, lambda_f = r_f N/p."""
    g = panel.graph
    return penalty_grid(np.asarray(ratios_w) * g.n_obs / g.n_workers, np.asarray(ratios_f) * g.n_obs / g.n_firms)


def cross_validate(panel, test_panels, grid, workers=1, method="auto"):
    """Pick (lambda_w, lambda_f) minimizing the mean out-of-sample MSE over the test panels.

    Grid points whose fit or scoring fails are kept with a NaN score. Ties
    go to the larger penalty pair.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("cross-validation grid is empty")
    if not all(pen.positive for pen in grid):
        raise ConfigError("cross-validation grid entries must be positive")
    test_panels = list(test_panels) if isinstance(test_panels, (list, tuple)) else [test_panels]

    def score(pen):
        try:
            fit = ridge_fit(panel, pen, method=method)
            return float(np.mean([out_of_sample_mse(fit, test).mse for test in test_panels]))
        except (EstimationError, DecompositionError) as exc:
            log.warning("grid point (%g, %g) invalid: %s", pen.lambda_w, pen.lambda_f, exc)
            return np.nan

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            mse = list(pool.map(score, grid))
    else:
        mse = [score(pen) for pen in grid]

    values = np.asarray(mse, dtype=float)
    if np.all(np.isnan(values)):
        raise DecompositionError("every cross-validation grid point failed")
    lowest = np.nanmin(values)
    tied = np.flatnonzero(values <= lowest * (1.0 + 1e-12)).tolist()
    best = max(tied, key=lambda i: (grid[i].lambda_w + grid[i].lambda_f, grid[i].lambda_w))
    result = CvResult(grid, mse, grid[best], float(values[best]), degree_normalized(panel, grid[best]))
    log.info(
        "cross-validation: best lambda=(%.4g, %.4g), normalized (%.3f, %.3f), mse %.4f",
        result.best.lambda_w,
        result.best.lambda_f,
        *result.normalized,
        result.best_mse,
    )
    return result


# ---------------------------------------------------------------------------
# prediction SSE
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SseResult:
    terms: dict
    total: float
    cov_cross_closed_form: float
    mc_total: Optional[float]
    mc_se: Optional[float]
    replications: int


def _random_effect_draws(assignment, dgp, gen, size):
    mu = dgp.mu_star[assignment.worker_types][:, None] + dgp.sigma_w * gen.standard_normal((assignment.n, size))
    phi = dgp.phi_star[assignment.firm_types][:, None] + dgp.sigma_f * gen.standard_normal((assignment.p, size))
    return mu, phi


def prediction_sse(g, assignment, affinity, dgp, penalties, replications, rng, oracle_replications=0, cap=DENSE_CAP):
    """Expected test-network SSE of ridge predictions under random effects, split into its terms.

    The training network ``g`` is fixed and spans every node of the
    assignment. Bias and variance terms are closed form; the cross
    covariance term is a Monte Carlo mean over ``replications`` joint draws
    of effects and residuals. With ``oracle_replications`` > 0 the SSE is
    also simulated directly on fresh test networks.
    """
    if max(g.n_workers, g.n_firms) > cap:
        raise DecompositionError(f"prediction SSE needs max(n, p) <= {cap}, got {max(g.shape)}")
    if g.shape != (assignment.n, assignment.p):
        raise DecompositionError("training network must span every node of the assignment")
    if replications < 2:
        raise ConfigError("prediction SSE needs at least two replications")
    solver = RidgeSolver(g, penalties)
    ops = solver.ops
    network = expected_network(assignment, affinity, penalties)
    dw, df = network.expected_worker_degrees, network.expected_firm_degrees
    mu_group, phi_group = dgp.mu_star[assignment.worker_types], dgp.phi_star[assignment.firm_types]
    b_mu, b_phi = bias_from_operators(ops, mu_group, phi_group)
    moments = variance_from_operators(ops, dgp.sigma, dgp.sigma_w, dgp.sigma_f, full=True, cap=cap)

    panel = OutcomePanel(g, np.zeros(g.n_obs))
    gen = rng.stream("sse", "draws")
    cross = []
    for start in range(0, replications, SSE_BATCH):
        size = min(SSE_BATCH, replications - start)
        mu, phi = _random_effect_draws(assignment, dgp, gen, size)
        y = mu[panel.obs_worker] + phi[panel.obs_firm] + dgp.sigma * gen.standard_normal((panel.n_obs, size))
        mu_hat, phi_hat = solver.fit_many(panel, y)
        e_mu = mu_hat - mu - b_mu[:, None]
        e_phi = phi_hat - phi - b_phi[:, None]
        cross.append(np.sum(e_mu * network.adjacency(e_phi), axis=0))
    cross = np.concatenate(cross)

    n_bar = float(dw.sum())
    terms = {
        "noise": n_bar * dgp.sigma**2,
        "bias_worker": float(b_mu @ (dw * b_mu)),
        "variance_worker": float(dw @ moments.var_mu_diag),
        "bias_cross": 2.0 * float(b_mu @ network.adjacency(b_phi)),
        "cov_cross": 2.0 * float(cross.mean()),
        "bias_firm": float(b_phi @ (df * b_phi)),
        "variance_firm": float(df @ moments.var_phi_diag),
    }
    closed = 2.0 * float(np.sum(network.dense_adjacency() * moments.cov_mu_phi))

    mc_total = mc_se = None
    if oracle_replications:
        sse = _direct_sse(g, assignment, affinity, dgp, solver, panel, rng, oracle_replications)
        mc_total = float(sse.mean())
        mc_se = float(sse.std(ddof=1) / np.sqrt(sse.size)) if sse.size > 1 else np.nan
    return SseResult(terms, float(sum(terms.values())), closed, mc_total, mc_se, replications)


def _direct_sse(g, assignment, affinity, dgp, solver, panel, rng, replications):
    gen = rng.stream("sse", "oracle")
    out = np.empty(replications)
    for r in range(replications):
        mu, phi = _random_effect_draws(assignment, dgp, gen, 1)
        mu, phi = mu[:, 0], phi[:, 0]
        y = mu[panel.obs_worker] + phi[panel.obs_firm] + dgp.sigma * gen.standard_normal(panel.n_obs)
        mu_hat, phi_hat = solver.fit_many(panel, y[:, None])
        test = sample_edges(assignment, affinity, rng, "sse_test", r)
        w = np.repeat(test.workers, test.mult)
        f = np.repeat(test.firms, test.mult)
        y_test = mu[w] + phi[f] + dgp.sigma * gen.standard_normal(w.size)
        out[r] = float(np.sum((y_test - mu_hat[w, 0] - phi_hat[f, 0]) ** 2))
    return out


# ---------------------------------------------------------------------------
# densities and scatter data
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class DensityResult:
    x: np.ndarray
    density: np.ndarray
    point_mass: bool
    bandwidth: float
    kde: Optional[gaussian_kde] = None

    def at(self, points):
        if self.kde is None:
            points = np.atleast_1d(np.asarray(points, dtype=float))
            return np.where(points == self.x[0], np.inf, 0.0)
        return self.kde(np.atleast_1d(points))


def density_report(values, points=DENSITY_POINTS, grid=None):
    """Gaussian KDE with Silverman's bandwidth on a regular grid.

    A constant input is reported as a point mass at its value.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size < 2:
        raise DecompositionError("a density needs at least two values")
    if np.ptp(values) == 0:
        return DensityResult(np.array([values[0]]), np.array([1.0]), True, 0.0)
    kde = gaussian_kde(values, bw_method="silverman")
    bandwidth = float(np.sqrt(kde.covariance[0, 0]))
    if grid is None:
        grid = np.linspace(values.min() - 3 * bandwidth, values.max() + 3 * bandwidth, points)
    grid = np.asarray(grid, dtype=float)
    return DensityResult(grid, kde(grid), False, bandwidth, kde)


def density_table(series, points=DENSITY_POINTS):
    """Long-format densities, one block per named series, evaluated on a shared grid."""
    pooled = np.concatenate([np.asarray(v, dtype=float).ravel() for v in series.values()])
    pad = 3 * pooled.std() * pooled.size ** (-1 / 5) if pooled.size else 0.0
    grid = np.linspace(pooled.min() - pad, pooled.max() + pad, points)
    frames = []
    for name, values in series.items():
        res = density_report(values, grid=grid)
        frames.append(pd.DataFrame({"series": name, "x": res.x, "density": res.density, "point_mass": res.point_mass}))
    return pd.concat(frames, ignore_index=True)


def scatter_table(node_ids, truth, estimates):
    """Rows of (node_id, truth, one column per estimator)."""
    frame = pd.DataFrame({"node_id": node_ids, "truth": truth})
    for name, values in estimates.items():
        frame[name] = values
    return frame
