import math
from dataclasses import replace
from unittest.mock import MagicMock

import numpy as np
import pytest

from ridge_twfe.bounds import (
    FLOORS,
    BoundEntry,
    BoundInputs,
    bias_bound,
    bound_t,
    inverse_laplacian_bound,
    inverse_schur_bound,
    laplacian_bound,
    log_rule_penalties,
    normalized_adjacency_bound,
    run_bounds,
    sse_bias_gap_bound,
    theorem1_check,
    theorem4_check,
    variance_bound,
)
from ridge_twfe.errors import ConfigError
from ridge_twfe.graph import RidgePenalties
from ridge_twfe.sbm import SbmParams, design_affinity, desk_params, draw_assignment, expected_network


@pytest.fixture
def inputs():
    return BoundInputs(100, 50, RidgePenalties(10.0, 20.0), 0.1, 2.0, 8.0, 4.0, 16.0)


# ---- #
# Scalar inputs
# ---- #
def test_bound_inputs_scalars(inputs):
    assert inputs.gamma == pytest.approx(0.5)
    assert inputs.m_w == pytest.approx(1 / 12)
    assert inputs.m_f == pytest.approx(1 / 24)
    assert inputs.m == pytest.approx(1 / 12)
    assert inputs.t == pytest.approx(math.sqrt(0.25 * math.log(1500)))
    assert not inputs.applicable
    assert inputs.chi_w == pytest.approx(16 / 12)
    assert inputs.chi_f == 1.0
    assert inputs.ratio("worker") == pytest.approx(1.5)
    assert inputs.ratio("firm") == pytest.approx(1.5)


def test_applicable_with_large_penalties():
    bi = BoundInputs(100, 50, RidgePenalties(1000.0, 1000.0), 0.1, 2.0, 8.0, 4.0, 16.0)
    assert bi.applicable
    assert bi.t < 1.0
    assert bi.as_dict()["applicable"] is True


def test_probability_floor_is_exact(inputs):
    assert inputs.floor(3, 4) == pytest.approx(1 - 5 / 1.5 * 0.1)
    loose = BoundInputs(100, 50, RidgePenalties(1.0, 1.0), 0.9, 1.0, 1.0, 1.0, 1.0)
    assert loose.floor(*FLOORS["variance_worker"]) == pytest.approx(1 - 16 / 1.5 * 0.9)
    assert loose.floor(*FLOORS["variance_worker"]) < 0


def test_bound_expressions(inputs):
    t = inputs.t
    assert normalized_adjacency_bound(inputs) == pytest.approx(4 * t)
    assert laplacian_bound(inputs) == pytest.approx(8 * t)
    assert inverse_laplacian_bound(inputs, "worker") == pytest.approx(16 * t * 1.8**2)
    assert inverse_schur_bound(inputs, "worker") == pytest.approx(29 * 18 / 100 * t)
    assert inverse_schur_bound(inputs, "firm") == pytest.approx(29 * 36 / 400 * t)
    unpenalized = BoundInputs(100, 50, RidgePenalties(0.0, 1.0), 0.1, 2.0, 8.0, 4.0, 16.0)
    assert inverse_laplacian_bound(unpenalized, "worker") == math.inf


def test_bounds_shrink_as_penalties_grow(inputs):
    mu_norm, phi_norm = np.linalg.norm(np.arange(5.0)), np.linalg.norm(0.4 * np.arange(5.0))
    series = {}
    for lam in np.geomspace(16.0, 16000.0, 60):
        bi = replace(inputs, penalties=RidgePenalties(lam, lam))
        values = {"adjacency": normalized_adjacency_bound(bi), "laplacian": laplacian_bound(bi)}
        for side in ("worker", "firm"):
            values[f"inverse_laplacian_{side}"] = inverse_laplacian_bound(bi, side)
            values[f"inverse_schur_{side}"] = inverse_schur_bound(bi, side)
            values[f"bias_{side}"] = bias_bound(bi, side, mu_norm, phi_norm)
            values[f"variance_{side}"] = variance_bound(bi, side, 2.0, math.sqrt(2.0), 1.0)
        for name, value in values.items():
            series.setdefault(name, []).append(value)
    for name, values in series.items():
        assert np.all(np.diff(values) < 0), name


def test_variance_bound_cancels_to_schur_bound(inputs):
    # lambda_w sigma_w^2 = lambda_f sigma_f^2 = sigma^2
    bi = replace(inputs, penalties=RidgePenalties(4.0, 1.0))
    for side in ("worker", "firm"):
        assert variance_bound(bi, side, 2.0, 1.0, 2.0) == pytest.approx(4.0 * inverse_schur_bound(bi, side), rel=1e-12)
    assert variance_bound(bi, "worker", 2.0, 1.5, 2.0) > 4.0 * inverse_schur_bound(bi, "worker")


def test_log_rule_penalties():
    lam, eps = log_rule_penalties(900, 100, 0.5)
    assert lam.lambda_w == lam.lambda_f == pytest.approx(4.5 * math.log(1000))
    assert eps == pytest.approx(1000**-0.5)
    with pytest.raises(ConfigError):
        log_rule_penalties(10, 10, 1.0)


def test_bound_t_from_expected_network(small_model):
    params, a = small_model
    lam = RidgePenalties(2.0, 2.0)
    network = expected_network(a, params.affinity, lam)
    bi = bound_t(network, lam, 0.05)
    assert (bi.n, bi.p) == (a.n, a.p)
    assert bi.dw_max == pytest.approx(network.expected_worker_degrees.max())
    assert bi.df_min == pytest.approx(network.expected_firm_degrees.min())
    with pytest.raises(ConfigError):
        bound_t(network, lam, 1.5)


def test_sse_bias_gap_bound():
    assert sse_bias_gap_bound(2.0, [3.0, 4.0], [0.0, 0.0]) == pytest.approx(2.0 * 5.0 * 5.0)
    assert sse_bias_gap_bound(2.0, [1.0, 1.0], [1.0, 1.0]) == 0.0


def test_bound_entry_rates():
    entry = BoundEntry(1, "laplacian_worker", "worker", 0.9, True, [1.0, 2.0, 3.0, 4.0], [2.0] * 4, [0, 1, 2, 3])
    assert entry.violations == 2
    assert entry.violation_rate == pytest.approx(0.5)
    assert entry.allowed_rate == pytest.approx(0.1)
    assert entry.within_floor()
    assert not entry.within_floor(z=2.0)
    row = entry.as_dict()
    assert row["max_deviation"] == 4.0 and row["median_deviation"] == 2.5


# ---- #
# Monte Carlo checks
# ---- #
def test_run_bounds_small_instance(make_params):
    params = make_params(n0=60, p0=30, seed=2)
    progress = MagicMock()
    report = run_bounds(
        params,
        RidgePenalties(5.0, 5.0),
        0.1,
        3,
        mu_star=[0.0, 1.0],
        phi_star=[0.0, 0.4],
        sigma=2.0,
        sigma_w=math.sqrt(2.0),
        sigma_f=1.0,
        progress=progress,
    )
    assert progress.call_count == 3
    names = {e.name for e in report.entries}
    assert set(FLOORS) <= names
    assert {"laplacian_worker_vs_adjacency", "laplacian_firm_vs_adjacency", "sse_bias_gap"} <= names
    for name in ("laplacian_worker_vs_adjacency", "laplacian_firm_vs_adjacency", "sse_bias_gap"):
        entry = report.entry(name)
        assert entry.n_used + entry.excluded == 3
        assert entry.violations == 0
    for entry in report.entries:
        assert all(np.isfinite(entry.deviations)) and all(d >= 0 for d in entry.deviations)
    rows = list(report.rows())
    assert len(rows) == sum(e.n_used for e in report.entries)
    summary = report.summary()
    assert summary["inputs"]["applicable"] == report.applicable
    assert len(summary["entries"]) == len(report.entries)


def test_threaded_run_matches_serial(make_params):
    params = make_params(n0=40, p0=20, seed=4)
    lam = RidgePenalties(4.0, 4.0)
    serial = theorem1_check(params, lam, 0.1, 3)
    threaded = theorem1_check(params, lam, 0.1, 3, workers=2)
    assert {e.theorem for e in serial.entries} == {1}
    for a, b in zip(serial.entries, threaded.entries):
        assert a.name == b.name
        assert a.deviations == b.deviations


def test_zero_group_means_give_zero_bias_gap(make_params):
    params = make_params(seed=6)
    assignment = draw_assignment(params)
    report = theorem4_check(params, RidgePenalties(3.0, 3.0), 0.1, [0.0, 0.0], [0.0, 0.0], 2, assignment=assignment)
    for side in ("worker", "firm"):
        assert report.entry(f"bias_{side}").deviations == [0.0, 0.0]
    assert report.entry("sse_bias_gap").deviations == [0.0, 0.0]


def test_run_bounds_rejects_bad_settings(make_params):
    params = make_params()
    with pytest.raises(ConfigError):
        run_bounds(params, RidgePenalties(1.0, 1.0), 0.1, 1, theorems=(6,))
    with pytest.raises(ConfigError):
        run_bounds(params, RidgePenalties(0.0, 1.0), 0.1, 1)


def test_variance_gap_is_scaled_schur_gap_when_prior_cancels(small_model):
    params, a = small_model
    report = run_bounds(params, RidgePenalties(4.0, 1.0), 0.1, 3, theorems=(3, 5), sigma=2.0, sigma_w=1.0, sigma_f=2.0, assignment=a)
    for side in ("worker", "firm"):
        schur, variance = report.entry(f"inverse_schur_{side}"), report.entry(f"variance_{side}")
        assert variance.replications == schur.replications
        assert variance.deviations == pytest.approx([4.0 * d for d in schur.deviations], rel=1e-6)
        assert variance.bound == pytest.approx(4.0 * schur.bound, rel=1e-12)


# ---- #
# Full protocols
# ---- #
@pytest.mark.slow
def test_desk_scale_violation_rates():
    params = desk_params(seed=0)
    lam, _ = log_rule_penalties(params.n0, params.p0, 0.5)
    report = run_bounds(params, lam, 0.1, 200, theorems=(1, 2, 3), workers=4)
    assert {e.theorem for e in report.entries} == {1, 2, 3}
    for entry in report.entries:
        assert entry.n_used >= 180, entry.name
        assert entry.within_floor(), entry.name


@pytest.mark.slow
def test_bias_and_variance_violation_rates(make_params):
    params = make_params(n0=200, p0=100, K=3, seed=1)
    lam, _ = log_rule_penalties(params.n0, params.p0, 0.5)
    report = run_bounds(
        params,
        lam,
        0.1,
        100,
        theorems=(4, 5),
        mu_star=np.arange(3.0),
        phi_star=0.4 * np.arange(3.0),
        sigma=2.0,
        sigma_w=math.sqrt(2.0),
        sigma_f=1.0,
        workers=4,
    )
    assert {e.theorem for e in report.entries} == {4, 5}
    for entry in report.entries:
        assert entry.n_used >= 90, entry.name
        assert entry.within_floor(), entry.name


def fixed_density_params(n0, p0, seed):
    """Every pair links with probability 0.3, whatever the size."""
    return SbmParams.uniform(n0, p0, design_affinity(0.15 * n0, 2, p0, 1.0), theta_pareto_alpha=np.inf, seed=seed)


@pytest.mark.slow
def test_deviations_shrink_when_network_doubles():
    medians = []
    for n0, p0 in ((300, 150), (600, 300)):
        params = fixed_density_params(n0, p0, seed=5)
        lam, _ = log_rule_penalties(n0, p0, 0.5)
        report = run_bounds(params, lam, 0.1, 50, theorems=(1, 4), mu_star=[0.0, 1.0], phi_star=[0.0, 0.4], workers=4)
        adjacency = report.entry("normalized_adjacency").deviations
        bias = report.entry("bias_worker").deviations
        medians.append((np.median(adjacency), np.median(bias) / np.sqrt(n0)))
    (adj_small, bias_small), (adj_large, bias_large) = medians
    assert adj_large < adj_small
    assert bias_large < bias_small
