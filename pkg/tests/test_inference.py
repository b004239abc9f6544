import os

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import norm

from quantile_tmle import (
    density_at,
    discretize_gaussian,
    effect_report,
    eif_att,
    eif_missing,
    fit_gaussian_regression,
    fit_logistic,
    fit_scenario,
    generate_ks,
    make_uniform_grid,
    marginal_cdf,
    quantile_report,
    shift_power,
    wald_report,
    wald_test_effect,
)
from quantile_tmle._core import clamp_propensity
from quantile_tmle.exceptions import InferenceException
from quantile_tmle.models import Dataset, EstimateReport, GridDistribution, NuisancePair

full_sim = os.getenv("QUANTILE_TMLE_FULL_SIM")

# Three equally likely strata, outcomes on {0, 1, 2, 3}; each (x, m, y) cell is one row.
_P_Y = {0: [0.4, 0.3, 0.2, 0.1], 1: [0.1, 0.2, 0.3, 0.4], 2: [0.25, 0.25, 0.25, 0.25]}
_P_M = {0: 0.4, 1: 0.8, 2: 0.6}
_WRONG_G = {0: [0.1, 0.1, 0.4, 0.4], 1: [0.4, 0.4, 0.1, 0.1], 2: [0.7, 0.1, 0.1, 0.1]}
_WRONG_E = {0: 0.9, 1: 0.2, 2: 0.5}


def _cells() -> tuple[Dataset, np.ndarray, list[int]]:
    rows = []
    for stratum in (0, 1, 2):
        for value, p_y in enumerate(_P_Y[stratum]):
            rows.append((stratum, 1, float(value), _P_M[stratum] * p_y / 3.0))
        rows.append((stratum, 0, np.nan, (1.0 - _P_M[stratum]) / 3.0))
    x, m, y, p = (list(column) for column in zip(*rows))
    data = Dataset(covariates=np.array(x, dtype=float), indicator=m, outcome=y)
    return data, np.array(p), x


def _pair(strata: list[int], g: dict, e: dict) -> NuisancePair:
    grid = [[0.0, 1.0, 2.0, 3.0]] * len(strata)
    dist = GridDistribution(grid=grid, weights=[g[s] for s in strata])
    return NuisancePair(propensity=[e[s] for s in strata], conditional_distribution=dist)


def test_eif_is_doubly_robust():
    data, probabilities, strata = _cells()
    q = (0.7 + 0.3 + 0.5) / 3.0
    for g, e, unbiased in (
        (_P_Y, _P_M, True),
        (_P_Y, _WRONG_E, True),
        (_WRONG_G, _P_M, True),
        (_WRONG_G, _WRONG_E, False),
    ):
        drift = probabilities @ eif_missing(data, _pair(strata, g, e), 1.0, q, 1.0)
        if unbiased:
            assert abs(drift) < 1e-12
        else:
            assert abs(drift) > 1e-3


def test_eif_of_unobserved_unit_uses_only_the_model():
    data = Dataset(covariates=np.zeros((2, 1)), indicator=[1, 0], outcome=[0.0, np.nan])
    nuis = NuisancePair(
        propensity=[0.5, 0.5], conditional_distribution=make_uniform_grid([[0.0, 1.0]] * 2)
    )
    values = eif_missing(data, nuis, 0.0, 0.25, 2.0)
    assert np.isclose(values[1], -(0.5 - 0.25) / 2.0)
    assert np.isclose(values[0], -((1.0 - 0.5) / 0.5 + 0.5 - 0.25) / 2.0)


def test_eif_scales_inversely_with_density():
    data = Dataset(covariates=np.zeros((2, 1)), indicator=[1, 1], outcome=[0.0, 1.0])
    nuis = NuisancePair(
        propensity=[0.5, 1.0], conditional_distribution=make_uniform_grid([[0.0, 1.0]] * 2)
    )
    halved = eif_missing(data, nuis, 0.0, 0.5, 2.0)
    assert np.allclose(2.0 * halved, eif_missing(data, nuis, 0.0, 0.5, 1.0))
    for f_theta in (0.0, -1.0):
        with pytest.raises(InferenceException):
            eif_missing(data, nuis, 0.0, 0.5, f_theta)


def test_eif_att_of_treated_unit():
    data = Dataset(
        covariates=np.zeros((4, 1)),
        indicator=[1, 0, 1, 0],
        outcome=[0.0, 1.0, 2.0, 0.0],
        estimand="treated",
    )
    nuis = NuisancePair(
        propensity=[0.5] * 4, conditional_distribution=make_uniform_grid([[0.0, 1.0]] * 4)
    )
    values = eif_att(data, nuis, 0.0, 0.25, 1.0)
    assert np.isclose(values[0], -(0.5 - 0.25) / 0.5)
    assert np.isclose(values[3], -(1.0 - 0.5) / 0.5)
    assert np.allclose(eif_att(data, nuis, 0.0, 0.25, 1.0, p_treated=0.25), 2.0 * values)
    with pytest.raises(InferenceException):
        eif_missing(data, nuis, 0.0, 0.25, 1.0)


def test_eif_att_with_constant_propensity_is_reweighted_missing_eif():
    t = np.array([1, 0, 0, 1, 0])
    y = np.array([0.0, 1.0, -1.0, 2.0, 0.0])
    p = t.mean()
    grid = make_uniform_grid([[0.0, 1.0]] * 5)
    treated = Dataset(covariates=np.zeros((5, 1)), indicator=t, outcome=y, estimand="treated")
    controls_observed = Dataset(
        covariates=np.zeros((5, 1)), indicator=1 - t, outcome=np.where(t == 0, y, np.nan)
    )
    att = eif_att(
        treated, NuisancePair(propensity=[p] * 5, conditional_distribution=grid), 0.0, 0.25, 2.0
    )
    missing = eif_missing(
        controls_observed,
        NuisancePair(propensity=[1.0 - p] * 5, conditional_distribution=grid),
        0.0,
        0.25,
        2.0,
    )
    plug_in = -(grid.conditional_cdf(0.0) - 0.25) / 2.0
    assert np.allclose(att, missing + (t / p - 1.0) * plug_in)


def test_density_of_normal_sample():
    y = np.sort(np.random.default_rng(4).normal(size=2000))
    cdf = marginal_cdf(make_uniform_grid(y[None, :]))
    assert abs(density_at(cdf, 0.0) - norm.pdf(0.0)) < 0.1 * norm.pdf(0.0)


def test_density_scales_with_outcome():
    y = np.sort(np.random.default_rng(5).normal(size=300))
    narrow = density_at(marginal_cdf(make_uniform_grid(y[None, :])), 0.3)
    wide = density_at(marginal_cdf(make_uniform_grid(2.0 * y[None, :])), 0.6)
    assert np.isclose(wide, narrow / 2.0, rtol=1e-9)


def test_single_atom_density_is_floored(caplog):
    cdf = marginal_cdf(make_uniform_grid([[1.0, 1.0]]))
    assert density_at(cdf, 1.0) == 1e-8
    assert "single atom" in caplog.text


def test_wald_interval_width():
    report = wald_report(3.0, np.array([1.0, -1.0, 1.0, -1.0]), level=0.95, q=0.5)
    std_error = np.sqrt(4.0 / 3.0) / 2.0
    assert np.isclose(report.std_error, std_error)
    assert np.isclose(report.ci_high - 3.0, 1.959964 * std_error, atol=1e-6)
    assert np.isclose(3.0 - report.ci_low, 1.959964 * std_error, atol=1e-6)
    assert not report.degenerate


def test_zero_variance_collapses_interval(caplog):
    report = wald_report(2.0, np.zeros(10))
    assert report.degenerate
    assert report.ci_low == report.ci_high == 2.0
    assert "zero variance" in caplog.text


def test_wald_report_argument_checks():
    with pytest.raises(InferenceException):
        wald_report(0.0, np.array([1.0]))
    with pytest.raises(InferenceException):
        wald_report(0.0, np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        wald_report(0.0, np.array([1.0, 2.0]), level=1.0)


def test_wald_test_against_value_and_report():
    report = EstimateReport(q=0.5, theta_hat=1.0, std_error=0.5)
    z, p_value = wald_test_effect(report)
    assert np.isclose(z, 2.0)
    assert np.isclose(p_value, 2.0 * norm.sf(2.0))
    control = EstimateReport(q=0.5, theta_hat=0.0, std_error=0.5)
    z, _ = wald_test_effect(report, control)
    assert np.isclose(z, 1.0 / np.hypot(0.5, 0.5))
    assert wald_test_effect(report, 1.0) == (0.0, 1.0)


def test_wald_test_needs_standard_errors():
    with pytest.raises(InferenceException):
        wald_test_effect(EstimateReport(q=0.5, theta_hat=1.0))
    with pytest.raises(InferenceException):
        wald_test_effect(EstimateReport(q=0.5, theta_hat=1.0, std_error=0.0))


def _treated_sample(n: int, seed: int, delta: float = 0.0):
    local = np.random.default_rng(seed)
    x = local.normal(size=(n, 1))
    t = local.binomial(1, expit(0.5 * x[:, 0]))
    y = x[:, 0] + delta * t + local.normal(size=n)
    propensity = fit_logistic(x, t).predict(x)
    pairs = []
    for arm, p in ((1, propensity), (0, 1.0 - propensity)):
        model = fit_gaussian_regression(x[t == arm], y[t == arm])
        pairs.append(
            NuisancePair(
                propensity=clamp_propensity(p),
                conditional_distribution=discretize_gaussian(model, x, 200),
            )
        )
    return Dataset(covariates=x, indicator=t, outcome=y, estimand="treated"), pairs


def test_quantile_report_for_each_estimator():
    data, pairs = _treated_sample(400, 1)
    arm = data.arm(1)
    for name in ("tmle", "aipw", "od"):
        report = quantile_report(arm, pairs[0], 0.5, name)
        assert report.estimator == name
        assert report.ci_low <= report.theta_hat <= report.ci_high
        assert report.std_error > 0
        assert report.density_at_theta > 0
        assert (report.diagnostics is not None) == (name == "tmle")


def test_effect_report_detects_shift():
    data, pairs = _treated_sample(600, 2, delta=1.0)
    report = effect_report(data, pairs[0], pairs[1], 0.5)
    assert report.diagnostics is not None
    assert abs(report.theta_hat - 1.0) < 0.5
    assert report.ci_high - report.ci_low < 1.0
    _, p_value = wald_test_effect(report)
    assert p_value < 0.05


def test_effect_report_needs_treated_dataset():
    data, pairs = _treated_sample(50, 3)
    with pytest.raises(InferenceException):
        effect_report(data.arm(1), pairs[0], pairs[1], 0.5)


@pytest.mark.skipif(not full_sim, reason="Set QUANTILE_TMLE_FULL_SIM to run.")
def test_shift_of_one_is_detected():
    assert shift_power(n=2000, delta=1.0, reps=200, seed=11) > 0.5


@pytest.mark.skipif(not full_sim, reason="Set QUANTILE_TMLE_FULL_SIM to run.")
def test_null_rejection_rate_is_near_nominal():
    assert shift_power(n=500, delta=0.0, reps=200, seed=12) < 0.12


def _median_width(n: int, reps: int, seed: int) -> float:
    widths = []
    for child in np.random.SeedSequence(seed).spawn(reps):
        sample = generate_ks(n, np.random.default_rng(child))
        nuis_1, nuis_0 = fit_scenario(sample, "a", grid_size=200)
        report = effect_report(sample.dataset(), nuis_1, nuis_0, 0.5)
        widths.append(report.ci_high - report.ci_low)
    return float(np.median(widths))


@pytest.mark.skipif(not full_sim, reason="Set QUANTILE_TMLE_FULL_SIM to run.")
def test_interval_width_shrinks_with_root_n():
    ratio = _median_width(1000, 200, 31) / _median_width(500, 200, 32)
    assert 0.65 <= ratio <= 0.76
