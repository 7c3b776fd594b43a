import numpy as np
import pandas as pd
import pytest

from ridge_twfe.errors import EstimationError
from ridge_twfe.estimator import (
    FixedEffectDgp,
    OutcomePanel,
    RidgeFit,
    RidgeSolver,
    debiased_quadratics,
    deterministic_bias,
    deterministic_variance,
    generate_outcomes,
    insample_bias,
    insample_variance,
    ols_fit,
    panel_from_observations,
    design_effect_params,
    random_beta_variance,
    restrict_panel,
    ridge_fit,
)
from ridge_twfe.graph import NodeMapping, RidgePenalties, build_graph
from ridge_twfe.rng import RngStreams
from ridge_twfe.sbm import edge_probabilities, expected_network


def design(panel):
    return np.hstack([panel.worker_design.toarray(), panel.firm_design.toarray()])


def penalty_diag(g, lam):
    return np.concatenate([np.full(g.n_workers, lam.lambda_w), np.full(g.n_firms, lam.lambda_f)])


def noisy_panel(g, seed=0, sigma=0.5):
    gen = np.random.default_rng(seed)
    mu = gen.standard_normal(g.n_workers)
    phi = gen.standard_normal(g.n_firms)
    panel = OutcomePanel(g, np.zeros(g.n_obs))
    return panel.with_y(mu[panel.obs_worker] + phi[panel.obs_firm] + sigma * gen.standard_normal(g.n_obs)), mu, phi


# ---- #
# Panels
# ---- #
def test_panel_from_observations_sorts_identifiers():
    panel = panel_from_observations(["b", "a", "b"], ["y", "x", "x"], [3.0, 1.0, 2.0])
    assert panel.worker_ids.tolist() == ["a", "b"]
    assert panel.firm_ids.tolist() == ["x", "y"]
    # canonical order: by firm, then worker
    assert panel.y.tolist() == [1.0, 2.0, 3.0]
    frame = panel.to_frame()
    assert frame["worker_id"].tolist() == ["a", "b", "b"]


def test_panel_rejects_length_mismatch(tiny_graph):
    with pytest.raises(EstimationError):
        OutcomePanel(tiny_graph, np.zeros(3))
    with pytest.raises(EstimationError):
        panel_from_observations([1, 2], [1], [0.0, 1.0])


def test_restrict_panel_keeps_surviving_rows(tiny_graph):
    panel = OutcomePanel(tiny_graph, np.arange(5, dtype=float))
    sub = restrict_panel(panel, NodeMapping(np.array([1, 2]), np.array([1])))
    assert sub.n_obs == 2
    assert sub.y.tolist() == [3.0, 4.0]
    assert sub.worker_ids.tolist() == [1, 2]


def test_sums_match_design(tiny_graph):
    panel = OutcomePanel(tiny_graph, np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    assert panel.worker_sums().tolist() == [1.0, 9.0, 5.0]
    assert panel.firm_sums().tolist() == [6.0, 9.0]


# ---- #
# Data generation
# ---- #
def test_effects_and_outcomes(small_model):
    params, a = small_model
    rng = RngStreams(1)
    dgp = FixedEffectDgp.draw(a, rng=rng.stream("effects"), **design_effect_params(a.K))
    assert dgp.mu.shape == (a.n,) and dgp.phi.shape == (a.p,)
    g = build_graph([(i, i % a.p, 1) for i in range(a.n)], a.n, a.p)
    panel = generate_outcomes(g, dgp, rng.stream("noise"))
    assert panel.n_obs == a.n
    zero = FixedEffectDgp(dgp.mu_star, dgp.phi_star, 0.0, 0.0, 0.0, dgp.mu, dgp.phi)
    exact = generate_outcomes(g, zero, rng.stream("noise"))
    assert np.allclose(exact.y, dgp.mu[exact.obs_worker] + dgp.phi[exact.obs_firm])


def test_effect_validation(small_model):
    _, a = small_model
    with pytest.raises(EstimationError):
        FixedEffectDgp.draw(a, [0.0], [0.0], 1.0, 1.0, 1.0, np.random.default_rng(0))
    with pytest.raises(EstimationError):
        FixedEffectDgp(np.zeros(2), np.zeros(2), -1.0, 0.0, 0.0, np.zeros(1), np.zeros(1))


def test_design_effect_params():
    params = design_effect_params(5)
    assert params["mu_star"].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert params["phi_star"][4] == pytest.approx(1.6)
    assert params["sigma"] == 2.0
    assert params["sigma_w"] ** 2 == pytest.approx(2.0)


# ---- #
# Ridge
# ---- #
def test_ridge_single_match_by_hand():
    panel = panel_from_observations(["a", "a"], ["x", "x"], [1.0, 3.0])
    fit = ridge_fit(panel, RidgePenalties(1.0, 1.0))
    assert fit.mu_hat[0] == pytest.approx(0.8)
    assert fit.phi_hat[0] == pytest.approx(0.8)
    assert fit.residuals.tolist() == pytest.approx([-0.6, 1.4])


def test_ridge_unequal_penalties_by_hand():
    # lambda_w mu = lambda_f phi, mu = S lambda_f / ((d + lambda_w) lambda_f + d lambda_w)
    panel = panel_from_observations([0, 0, 0], [0, 0, 0], [1.0, 2.0, 3.0])
    fit = ridge_fit(panel, RidgePenalties(2.0, 0.5))
    mu = 6.0 * 0.5 / (5.0 * 0.5 + 3.0 * 2.0)
    assert fit.mu_hat[0] == pytest.approx(mu)
    assert fit.phi_hat[0] == pytest.approx(4.0 * mu)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ridge_matches_dense_normal_equations(make_graph, seed):
    g = make_graph(seed, 30, 12, extra=40)
    panel, _, _ = noisy_panel(g, seed)
    lam = RidgePenalties(0.3 + seed, 1.7)
    x = design(panel)
    beta = np.linalg.solve(x.T @ x + np.diag(penalty_diag(g, lam)), x.T @ panel.y)
    for method, atol in (("splu", 1e-8), ("pcg", 1e-6)):
        fit = ridge_fit(panel, lam, method=method)
        assert np.allclose(np.concatenate([fit.mu_hat, fit.phi_hat]), beta, atol=atol)
        assert fit.solver_info.relative_residual < 1e-8
    assert np.allclose(fit.residuals, panel.y - x @ beta, atol=1e-8)


def test_ridge_needs_positive_penalties(tiny_graph):
    panel = OutcomePanel(tiny_graph, np.ones(5))
    with pytest.raises(EstimationError):
        ridge_fit(panel, RidgePenalties(0.0, 1.0))


def test_ridge_keeps_isolated_nodes_at_zero():
    g = build_graph([(0, 0, 2)], n_workers=2, n_firms=2)
    fit = ridge_fit(OutcomePanel(g, np.array([1.0, 1.0])), RidgePenalties(1.0, 1.0))
    assert fit.mu_hat[1] == pytest.approx(0.0, abs=1e-14)
    assert fit.phi_hat[1] == pytest.approx(0.0, abs=1e-14)


def test_ridge_norm_shrinks_as_penalty_grows(make_graph):
    g = make_graph(5, 20, 8, extra=25)
    panel, _, _ = noisy_panel(g, seed=5)
    norms = []
    for lam in np.geomspace(0.01, 100.0, 40):
        fit = ridge_fit(panel, RidgePenalties(lam, lam))
        norms.append(np.linalg.norm(np.concatenate([fit.mu_hat, fit.phi_hat])))
    assert np.all(np.diff(norms) < 0)


def test_ridge_fit_is_linear_in_outcomes(make_graph):
    g = make_graph(6, 20, 8, extra=25)
    gen = np.random.default_rng(6)
    panel = OutcomePanel(g, np.zeros(g.n_obs))
    y1, y2 = gen.standard_normal(g.n_obs), 3.0 * gen.standard_normal(g.n_obs)
    lam = RidgePenalties(0.7, 1.9)
    first, second = ridge_fit(panel.with_y(y1), lam), ridge_fit(panel.with_y(y2), lam)
    gap = ridge_fit(panel.with_y(y1 - y2), lam)
    assert np.allclose(first.mu_hat - second.mu_hat, gap.mu_hat, atol=1e-10)
    assert np.allclose(first.phi_hat - second.phi_hat, gap.phi_hat, atol=1e-10)


def test_fit_many_matches_single_fits(make_graph):
    g = make_graph(7, 15, 6, extra=10)
    panel, _, _ = noisy_panel(g)
    lam = RidgePenalties(1.0, 1.0)
    solver = RidgeSolver(g, lam)
    outcomes = np.column_stack([panel.y, 2.0 * panel.y + 1.0])
    mu, phi = solver.fit_many(panel, outcomes)
    for r in range(2):
        fit = solver.fit(panel.with_y(outcomes[:, r]))
        assert np.allclose(mu[:, r], fit.mu_hat)
        assert np.allclose(phi[:, r], fit.phi_hat)


def test_fit_frame_and_true_effects(tiny_graph):
    panel = OutcomePanel(tiny_graph, np.array([1.0, 1.0, 1.0, 2.0, 2.0]))
    fit = RidgeFit.from_effects(panel, [1.0, 1.0, 1.0], [0.0, 1.0])
    assert np.allclose(fit.residuals, 0.0)
    frame = fit.to_frame()
    assert isinstance(frame, pd.DataFrame)
    assert frame["node_kind"].tolist() == ["worker"] * 3 + ["firm"] * 2
    assert fit.estimator == "true"


# ---- #
# OLS
# ---- #
def test_ols_recovers_noiseless_effects(make_graph):
    g = make_graph(3, 20, 8, extra=15)
    panel, mu, phi = noisy_panel(g, sigma=0.0)
    fit = ols_fit(panel)
    assert fit.phi_hat[0] == 0.0
    assert np.allclose(fit.mu_hat, mu + phi[0], atol=1e-8)
    assert np.allclose(fit.phi_hat, phi - phi[0], atol=1e-8)
    assert fit.solver_info.pinned_firm == 0
    assert fit.estimator == "ols"


def test_ols_fitted_values_match_least_squares(make_graph):
    g = make_graph(9, 25, 10, extra=30)
    panel, _, _ = noisy_panel(g, seed=9)
    x = design(panel)
    beta, *_ = np.linalg.lstsq(x, panel.y, rcond=None)
    for pin in (0, 4):
        fit = ols_fit(panel, pin_firm=pin)
        assert fit.phi_hat[pin] == 0.0
        assert np.allclose(fit.fitted(panel), x @ beta, atol=1e-8)


def test_ols_rejects_disconnected_graph(split_graph):
    panel = OutcomePanel(split_graph, np.array([1.0, 2.0, 3.0]))
    with pytest.raises(EstimationError) as info:
        ols_fit(panel)
    assert "components" in str(info.value)


# ---- #
# Bias and variance
# ---- #
def test_insample_moments_match_dense_formulas(make_graph):
    g = make_graph(11, 18, 7, extra=20)
    panel, mu, phi = noisy_panel(g)
    lam = RidgePenalties(0.8, 1.2)
    x = design(panel)
    lam_diag = penalty_diag(g, lam)
    h_inv = np.linalg.inv(x.T @ x + np.diag(lam_diag))
    bias_mu, bias_phi = insample_bias(g, lam, mu, phi)
    expected_bias = -h_inv @ (lam_diag * np.concatenate([mu, phi]))
    assert np.allclose(np.concatenate([bias_mu, bias_phi]), expected_bias, atol=1e-10)

    sigma, sigma_w, sigma_f = 1.5, 0.7, 0.4
    report = insample_variance(g, lam, sigma, full=True)
    dense = sigma**2 * h_inv @ x.T @ x @ h_inv
    assert report.full
    assert np.allclose(report.var_mu, dense[:18, :18], atol=1e-10)
    assert np.allclose(report.var_phi, dense[18:, 18:], atol=1e-10)
    assert np.allclose(report.cov_mu_phi, dense[:18, 18:], atol=1e-10)

    beta_var = np.concatenate([np.full(18, sigma_w**2), np.full(7, sigma_f**2)])
    dense = h_inv @ (sigma**2 * x.T @ x + np.diag(lam_diag**2 * beta_var)) @ h_inv
    report = random_beta_variance(g, lam, sigma, sigma_w, sigma_f, full=False)
    assert not report.full
    assert np.allclose(report.var_mu_diag, np.diag(dense)[:18], atol=1e-10)
    assert np.allclose(report.var_phi_diag, np.diag(dense)[18:], atol=1e-10)


def test_insample_moments_match_monte_carlo(make_graph):
    g = make_graph(13, 12, 6, extra=10)
    gen = np.random.default_rng(13)
    mu, phi = gen.standard_normal(12), gen.standard_normal(6)
    lam, sigma, reps = RidgePenalties(1.0, 2.0), 1.0, 4000
    panel = OutcomePanel(g, np.zeros(g.n_obs))
    signal = mu[panel.obs_worker] + phi[panel.obs_firm]
    outcomes = signal[:, None] + sigma * gen.standard_normal((g.n_obs, reps))
    mu_hat, phi_hat = RidgeSolver(g, lam).fit_many(panel, outcomes)
    bias_mu, bias_phi = insample_bias(g, lam, mu, phi)
    report = insample_variance(g, lam, sigma)
    for est, truth, bias, var in ((mu_hat, mu, bias_mu, report.var_mu_diag), (phi_hat, phi, bias_phi, report.var_phi_diag)):
        err = est - truth[:, None]
        assert np.all(np.abs(err.mean(axis=1) - bias) <= 5 * np.sqrt(var / reps))
        assert np.allclose(err.var(axis=1), var, rtol=0.15)


@pytest.mark.slow
def test_insample_moments_within_three_standard_errors(make_graph):
    g = make_graph(17, 6, 3, extra=6)
    gen = np.random.default_rng(17)
    mu, phi = gen.standard_normal(6), gen.standard_normal(3)
    lam, sigma, reps = RidgePenalties(0.5, 1.5), 1.0, 20000
    panel = OutcomePanel(g, np.zeros(g.n_obs))
    signal = mu[panel.obs_worker] + phi[panel.obs_firm]
    outcomes = signal[:, None] + sigma * gen.standard_normal((g.n_obs, reps))
    mu_hat, phi_hat = RidgeSolver(g, lam).fit_many(panel, outcomes)
    bias_mu, bias_phi = insample_bias(g, lam, mu, phi)
    report = insample_variance(g, lam, sigma)
    for est, truth, bias, var in ((mu_hat, mu, bias_mu, report.var_mu_diag), (phi_hat, phi, bias_phi, report.var_phi_diag)):
        err = est - truth[:, None]
        assert np.all(np.abs(err.mean(axis=1) - bias) <= 3 * np.sqrt(var / reps))
        # sample variance of a Gaussian has standard error var * sqrt(2 / reps)
        assert np.all(np.abs(err.var(axis=1, ddof=1) - var) <= 3 * var * np.sqrt(2.0 / reps))


def test_variance_needs_positive_penalties(tiny_graph):
    with pytest.raises(EstimationError):
        insample_variance(tiny_graph, RidgePenalties(0.0, 1.0), 1.0)


def test_full_variance_above_cap(make_graph):
    g = make_graph(0, 10, 5)
    with pytest.raises(EstimationError):
        insample_variance(g, RidgePenalties(1.0, 1.0), 1.0, full=True, cap=5)


def test_deterministic_moments_match_dense(small_model):
    params, a = small_model
    lam = RidgePenalties(1.0, 1.5)
    network = expected_network(a, params.affinity, lam)
    bb = edge_probabilities(a, params.affinity).group_rates()[a.worker_types]
    h = np.block([[np.diag(bb.sum(axis=1) + 1.0), bb], [bb.T, np.diag(bb.sum(axis=0) + 1.5)]])
    h_inv = np.linalg.inv(h)
    lam_diag = np.concatenate([np.full(a.n, 1.0), np.full(a.p, 1.5)])
    mu_star, phi_star = np.array([0.0, 1.0]), np.array([0.0, 0.4])
    beta = np.concatenate([mu_star[a.worker_types], phi_star[a.firm_types]])
    bias_mu, bias_phi = deterministic_bias(network, None, mu_star, phi_star)
    assert np.allclose(np.concatenate([bias_mu, bias_phi]), -h_inv @ (lam_diag * beta), atol=1e-10)

    sigma, sigma_w, sigma_f = 2.0, 1.0, 0.5
    beta_var = np.concatenate([np.full(a.n, sigma_w**2), np.full(a.p, sigma_f**2)])
    dense = h_inv @ (sigma**2 * (h - np.diag(lam_diag)) + np.diag(lam_diag**2 * beta_var)) @ h_inv
    report = deterministic_variance(network, None, sigma, sigma_w, sigma_f, full=True)
    assert report.deterministic
    assert np.allclose(report.var_mu, dense[: a.n, : a.n], atol=1e-10)
    assert np.allclose(report.var_phi, dense[a.n :, a.n :], atol=1e-10)

    other = deterministic_variance(network, RidgePenalties(3.0, 3.0), sigma, sigma_w, sigma_f)
    assert other.penalties == RidgePenalties(3.0, 3.0)


# ---- #
# Debiased OLS components
# ---- #
def dense_traces(panel, pin):
    g = panel.graph
    big_n = g.n_obs
    free = np.delete(np.arange(g.n_firms), pin)
    w = panel.worker_design.toarray()
    f = panel.firm_design.toarray()[:, free]
    s = np.linalg.inv(np.hstack([w, f]).T @ np.hstack([w, f]))
    m = np.eye(big_n) - np.ones((big_n, big_n)) / big_n
    zw = np.hstack([w, np.zeros_like(f)])
    zf = np.hstack([np.zeros_like(w), f])
    q_w = zw.T @ m @ zw / big_n
    q_f = zf.T @ m @ zf / big_n
    q_c = 0.5 * (zw.T @ m @ zf + zf.T @ m @ zw) / big_n
    return {"var_worker": np.trace(q_w @ s), "var_firm": np.trace(q_f @ s), "cov": np.trace(q_c @ s)}


@pytest.mark.parametrize("pin", [0, 3])
def test_debiased_traces_match_dense(make_graph, pin):
    g = make_graph(17, 20, 8, extra=40)
    panel, _, _ = noisy_panel(g, seed=17, sigma=1.0)
    fit = ols_fit(panel, pin_firm=pin)
    quad = debiased_quadratics(panel, fit)
    assert quad.exact_traces
    expected = dense_traces(panel, pin)
    for key, value in expected.items():
        assert quad.traces[key] == pytest.approx(value, abs=1e-9)
        assert quad.corrected[key] == pytest.approx(quad.plug_in[key] - quad.sigma2_hat * value)
    assert quad.total_variance == pytest.approx(np.var(panel.y))


def test_debiased_without_noise_equals_plug_in(make_graph):
    g = make_graph(19, 20, 8, extra=40)
    panel, _, _ = noisy_panel(g, sigma=0.0)
    quad = debiased_quadratics(panel, ols_fit(panel))
    assert quad.sigma2_hat == pytest.approx(0.0, abs=1e-12)
    for key in quad.plug_in:
        assert quad.corrected[key] == pytest.approx(quad.plug_in[key], abs=1e-10)


def test_debiased_probing_above_cap(make_graph):
    g = make_graph(23, 20, 8, extra=40)
    panel, _, _ = noisy_panel(g, sigma=1.0)
    quad = debiased_quadratics(panel, ols_fit(panel), cap=0, probes=16, seed=5)
    assert not quad.exact_traces
    assert np.isfinite(quad.traces["var_firm"])


def test_debiased_needs_pinned_fit_and_residual_dof(make_graph):
    g = make_graph(29, 10, 5, extra=20)
    panel, _, _ = noisy_panel(g)
    with pytest.raises(EstimationError):
        debiased_quadratics(panel, ridge_fit(panel, RidgePenalties(1.0, 1.0)))
    single = panel_from_observations([0, 1, 1], [0, 0, 1], [1.0, 2.0, 3.0])
    with pytest.raises(EstimationError):
        debiased_quadratics(single, ols_fit(single))
