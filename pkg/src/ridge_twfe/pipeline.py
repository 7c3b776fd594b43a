"""
Simulation runs behind the command-line tools
---------------------------------------------------------------------------

A run draws one assignment, one training network and one set of effects,
keeps the largest connected component for estimation and scores fits on
fresh test networks over the same nodes. Node ids in every panel are the
indices of the full assignment, so fits and test panels line up by id.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ridge_twfe.bounds import run_bounds
from ridge_twfe.config import resolve_penalties, sbm_params
from ridge_twfe.decomposition import (
    cross_validate,
    decompose,
    decompose_debiased,
    decompose_effects,
    degree_grid,
    degree_normalized,
    density_table,
    log_grid,
    make_test_panel,
    out_of_sample_mse,
    scatter_table,
)
from ridge_twfe.errors import EstimationError
from ridge_twfe.estimator import FixedEffectDgp, RidgeFit, debiased_quadratics, generate_outcomes, ols_fit, restrict_panel, ridge_fit
from ridge_twfe.graph import connected_components, graph_summary, largest_component
from ridge_twfe.rng import RngStreams
from ridge_twfe.sbm import draw_assignment, edge_probabilities, sample_edges

log = logging.getLogger(__name__)

FIGURE_SERIES = ("true", "ols", "ridge")


@dataclass(frozen=True, eq=False)
class SimulationResult:
    params: object
    rng: RngStreams
    assignment: object
    dgp: FixedEffectDgp
    graph: object
    labeling: object
    mapping: object
    panel: object
    summary: dict

    @property
    def true_mu(self):
        return self.dgp.mu[self.mapping.workers]

    @property
    def true_phi(self):
        return self.dgp.phi[self.mapping.firms]


def simulate(params, effect_params):
    """Assignment, network, effects and outcomes for one seed; the panel is the largest component."""
    rng = RngStreams(params.seed)
    assignment = draw_assignment(params, rng)
    g = sample_edges(assignment, params.affinity, rng, "network")
    dgp = FixedEffectDgp.draw(assignment, rng=rng.stream("effects"), **effect_params)
    full_panel = generate_outcomes(g, dgp, rng.stream("noise"))
    labeling = connected_components(g)
    selection = largest_component(g, labeling)
    panel = restrict_panel(full_panel, selection.mapping)
    summary = graph_summary(selection.graph, labeling)
    summary["p0"] = params.p0
    summary["n0"] = params.n0
    log.info("simulated network: n=%d p=%d N=%d, %d components", summary["n"], summary["p"], summary["N"], summary["n_components"])
    return SimulationResult(params, rng, assignment, dgp, g, labeling, selection.mapping, panel, summary)


def simulate_from_config(cfg):
    return simulate(sbm_params(cfg), cfg["dgp"])


def draw_test_panels(sim, n_draws=1):
    return [make_test_panel(sim.params, sim.assignment, sim.dgp, sim.rng, draw=d) for d in range(n_draws)]


def mean_oos_mse(fit, panels):
    return float(np.mean([out_of_sample_mse(fit, test).mse for test in panels]))


# --------------------------------------------------------------------------- #
# Penalties and grids
# --------------------------------------------------------------------------- #
def panel_penalties(block, panel):
    g = panel.graph
    return resolve_penalties(block, g.n_workers, g.n_firms, g.n_obs)


def grid_values(spec):
    if "values" in spec:
        return np.asarray(spec["values"], dtype=float)
    return log_grid(spec["lo"], spec["hi"], spec["num"])


def cv_grid(panel, cv_cfg):
    """Penalty grid on the degree-normalized scale of the training panel."""
    return degree_grid(panel, grid_values(cv_cfg["lw_norm"]), grid_values(cv_cfg["lf_norm"]))


# --------------------------------------------------------------------------- #
# Estimation
# --------------------------------------------------------------------------- #
def fit_panel(panel, estimator, penalties=None, pin_firm=0, method="auto"):
    """Fit one estimator; "ols_debiased" returns the OLS fit (its correction lives in the decomposition)."""
    if estimator == "ridge":
        return ridge_fit(panel, penalties, method=method)
    return ols_fit(panel, pin_firm=pin_firm, method=method)


def diagnostics(panel, fit, estimator, cap, seed):
    out = {
        "estimator": estimator,
        "n": panel.graph.n_workers,
        "p": panel.graph.n_firms,
        "N": panel.n_obs,
        "penalties": fit.penalties.as_dict(),
        "solver": fit.solver_info.as_dict(),
        "decomposition": decompose(panel, fit).as_row(fit.estimator),
    }
    if fit.penalties.positive:
        out["normalized_penalties"] = list(degree_normalized(panel, fit.penalties))
    if estimator == "ols_debiased":
        quadratics = debiased_quadratics(panel, fit, cap=cap, seed=seed)
        out["debiased"] = {
            "sigma2_hat": quadratics.sigma2_hat,
            "plug_in": quadratics.plug_in,
            "traces": quadratics.traces,
            "corrected": quadratics.corrected,
            "exact_traces": quadratics.exact_traces,
            "decomposition": decompose_debiased(panel, quadratics).as_row("ols_debiased"),
        }
    return out


@dataclass(frozen=True, eq=False)
class EstimatorTable:
    rows: list
    fits: dict
    penalties: object
    cv: Optional[object] = None


def estimator_table(sim, tests, penalties, cap, method="auto", cv=None):
    """The true, OLS, debiased-OLS and ridge rows on the simulated panel."""
    panel = sim.panel
    truth = RidgeFit.from_effects(panel, sim.true_mu, sim.true_phi)
    rows = [decompose_effects(panel, truth.mu_hat, truth.phi_hat).as_row("true")]
    fits = {"true": truth}

    ols = ols_fit(panel, method=method)
    fits["ols"] = ols
    rows.append(decompose(panel, ols).as_row("ols", oos_mse=mean_oos_mse(ols, tests)))
    try:
        quadratics = debiased_quadratics(panel, ols, cap=cap, seed=sim.params.seed)
        rows.append(decompose_debiased(panel, quadratics).as_row("ols_debiased"))
    except EstimationError as exc:
        log.warning("debiased OLS row skipped: %s", exc)

    ridge = ridge_fit(panel, penalties, method=method)
    fits["ridge"] = ridge
    lw_norm, lf_norm = degree_normalized(panel, penalties)
    rows.append(decompose(panel, ridge).as_row("ridge", oos_mse=mean_oos_mse(ridge, tests), lw_norm=lw_norm, lf_norm=lf_norm))
    return EstimatorTable(rows, fits, penalties, cv)


def figure_tables(sim, fits):
    """Density and scatter frames of the worker and firm effects under each estimator."""
    panel = sim.panel
    out = {}
    for kind, truth, attr, ids in (("mu", sim.true_mu, "mu_hat", panel.worker_ids), ("phi", sim.true_phi, "phi_hat", panel.firm_ids)):
        series = {name: getattr(fits[name], attr) for name in FIGURE_SERIES if name in fits}
        out[f"density_{kind}"] = density_table(series)
        estimates = {name: values for name, values in series.items() if name != "true"}
        out[f"scatter_{kind}"] = scatter_table(ids, truth, estimates)
    return out


def run_decomposition(cfg, cross_validate_penalties=None):
    """Simulate, optionally cross-validate, then build the estimator table and figure frames."""
    sim = simulate_from_config(cfg)
    tests = draw_test_panels(sim, cfg["cv"]["n_test_draws"])
    do_cv = cfg["cross_validate"] if cross_validate_penalties is None else cross_validate_penalties
    cv = None
    if do_cv:
        cv = cross_validate(sim.panel, tests, cv_grid(sim.panel, cfg["cv"]), workers=cfg["workers"])
        penalties = cv.best
    else:
        penalties = panel_penalties(cfg["penalties"], sim.panel)
    table = estimator_table(sim, tests, penalties, cfg["dense_cap"], cv=cv)
    return sim, table


def run_cv(cfg):
    sim = simulate_from_config(cfg)
    tests = draw_test_panels(sim, cfg["cv"]["n_test_draws"])
    return sim, cross_validate(sim.panel, tests, cv_grid(sim.panel, cfg["cv"]), workers=cfg["workers"])


# --------------------------------------------------------------------------- #
# Bounds
# --------------------------------------------------------------------------- #
def bounds_penalties(block, params, assignment):
    """Penalties for a bound check; degree-normalized values use the expected observation count."""
    expected_obs = edge_probabilities(assignment, params.affinity).clipping.total_mass
    return resolve_penalties(block, assignment.n, assignment.p, expected_obs)


def run_bound_checks(cfg, progress=None):
    params = sbm_params(cfg)
    rng = RngStreams(params.seed)
    assignment = draw_assignment(params, rng)
    penalties = bounds_penalties(cfg["penalties"], params, assignment)
    dgp, bcfg = cfg["dgp"], cfg["bounds"]
    return run_bounds(
        params,
        penalties,
        bcfg["epsilon"],
        bcfg["replications"],
        theorems=bcfg["theorems"],
        mu_star=dgp["mu_star"],
        phi_star=dgp["phi_star"],
        sigma=dgp["sigma"],
        sigma_w=dgp["sigma_w"],
        sigma_f=dgp["sigma_f"],
        rng=rng,
        assignment=assignment,
        workers=cfg["workers"],
        progress=progress,
    )
