import numpy as np
import pytest
from scipy.optimize import OptimizeResult
from scipy.special import expit

from quantile_tmle import (
    _estimators,
    discretize_gaussian,
    effect_on_quantile,
    estimate,
    estimate_aipw,
    estimate_firpo,
    estimate_ipw,
    estimate_od,
    fit_gaussian_regression,
    fit_logistic,
    make_uniform_grid,
    tmle_att,
    tmle_missing,
)
from quantile_tmle._core import clamp_propensity
from quantile_tmle.exceptions import EstimationException
from quantile_tmle.models import ESTIMATOR_NAMES, Dataset, GridDistribution, NuisancePair

rng = np.random.default_rng(2024)


def _sample_quantile(y: np.ndarray, q: float) -> float:
    return float(np.sort(y)[int(np.ceil(q * y.size)) - 1])


def _complete(y: np.ndarray) -> Dataset:
    return Dataset(covariates=np.zeros((y.size, 1)), indicator=np.ones(y.size), outcome=y)


def _empirical_pair(y: np.ndarray) -> NuisancePair:
    grid = make_uniform_grid(np.tile(np.sort(y), (y.size, 1)))
    return NuisancePair(propensity=np.ones(y.size), conditional_distribution=grid)


def _missing_at_random(n: int, seed: int) -> tuple[Dataset, NuisancePair]:
    local = np.random.default_rng(seed)
    x = local.normal(size=(n, 1))
    m = local.binomial(1, expit(0.5 + x[:, 0]))
    y = np.where(m == 1, 1.0 + x[:, 0] + local.normal(size=n), np.nan)
    data = Dataset(covariates=x, indicator=m, outcome=y)
    propensity = fit_logistic(x, m).predict(x)
    model = fit_gaussian_regression(x[m == 1], y[m == 1])
    nuis = NuisancePair(
        propensity=clamp_propensity(propensity),
        conditional_distribution=discretize_gaussian(model, x, 500),
    )
    return data, nuis


data_mar, nuis_mar = _missing_at_random(500, 5)


def test_od_on_empirical_grid_is_sample_quantile():
    y = rng.normal(size=37)
    for q in (0.1, 0.5, 0.9):
        assert estimate_od(_complete(y), _empirical_pair(y).conditional_distribution, q) == (
            _sample_quantile(y, q)
        )


def test_od_single_unit_two_atoms():
    data = Dataset(covariates=np.zeros((1, 1)), indicator=[1], outcome=[0.0])
    dist = make_uniform_grid(np.array([[0.0, 1.0]]))
    assert estimate_od(data, dist, 0.25) == 0.0


def test_ipw_hand_solved():
    data = _complete(np.array([1.0, 2.0, 3.0, 4.0]))
    assert estimate_ipw(data, np.array([0.5, 1.0, 1.0, 1.0]), 0.5) == 1.0
    assert estimate_ipw(data, np.array([1.0, 1.0, 1.0, 1.0]), 0.5) == 2.0


def test_ipw_unsolvable_returns_largest_observed(caplog):
    data = Dataset(
        covariates=np.zeros((4, 1)), indicator=[1, 0, 0, 0], outcome=[3.0, np.nan, np.nan, np.nan]
    )
    assert estimate_ipw(data, np.ones(4), 0.5) == 3.0
    assert "never reaches" in caplog.text


def test_firpo_check_loss_example():
    data = _complete(np.array([1.0, 2.0]))
    assert estimate_firpo(data, np.array([1.0 / 3.0, 1.0]), 0.5) == 1.0


def test_reduction_to_sample_quantile():
    for _ in range(50):
        y = rng.normal(size=37)
        data, nuis = _complete(y), _empirical_pair(y)
        for q in np.arange(1, 10) / 10:
            expected = _sample_quantile(y, q)
            assert estimate_ipw(data, np.ones(37), q) == expected
            assert estimate_firpo(data, np.ones(37), q) == expected
            assert estimate_aipw(data, nuis, q) == expected


def _aipw_oracle(data: Dataset, nuis: NuisancePair, q: float) -> float:
    dist = nuis.conditional_distribution
    observed = data.indicator == 1
    candidates = np.unique(np.concatenate([data.outcome[observed], dist.grid.ravel()]))

    def psi(theta):
        total = 0.0
        for i in range(data.n):
            g = sum(w for a, w in zip(dist.grid[i], dist.weights[i]) if a <= theta)
            if observed[i]:
                total += ((data.outcome[i] <= theta) - g) / nuis.propensity[i]
            total += g - q
        return total / data.n

    values = [psi(theta) for theta in candidates]
    crossings = [
        j for j, v in enumerate(values) if v >= -1e-12 and (j == 0 or values[j - 1] < -1e-12)
    ]
    best = min(crossings, key=lambda j: (abs(values[j]), candidates[j]))
    return float(candidates[best])


def test_aipw_matches_brute_force_on_toy():
    data = Dataset(
        covariates=np.zeros((3, 1)), indicator=[1, 0, 1], outcome=[0.4, np.nan, 2.2]
    )
    dist = GridDistribution(
        grid=[[0.0, 1.0, 2.0], [0.5, 1.5, 3.0], [1.0, 2.0, 2.5]],
        weights=[[0.2, 0.5, 0.3], [0.6, 0.2, 0.2], [0.1, 0.1, 0.8]],
    )
    nuis = NuisancePair(propensity=[0.8, 0.3, 0.6], conditional_distribution=dist)
    for q in (0.2, 0.5, 0.8):
        assert estimate_aipw(data, nuis, q) == _aipw_oracle(data, nuis, q)


def test_tmle_fixed_point_leaves_grid_untouched():
    y = rng.normal(size=40)
    data, nuis = _complete(y), _empirical_pair(y)
    theta, tilted, diagnostics = tmle_missing(data, nuis, 0.5)
    assert theta == estimate_od(data, nuis.conditional_distribution, 0.5)
    assert diagnostics.converged
    assert diagnostics.iterations == 1
    assert diagnostics.final_epsilon == 0.0
    assert diagnostics.score_residual <= diagnostics.score_bound
    assert np.allclose(tilted.weights, nuis.conditional_distribution.weights)


def test_tmle_reports_unsolvable_score_as_not_converged(caplog):
    y = rng.normal(size=41)
    _, _, diagnostics = tmle_missing(_complete(y), _empirical_pair(y), 0.5)
    assert diagnostics.final_epsilon == 0.0
    assert np.isclose(diagnostics.score_residual, 21 / 41 - 0.5)
    assert diagnostics.score_residual > diagnostics.score_bound
    assert not diagnostics.converged
    assert "exceeds" in caplog.text


def _forced_step(x: float, success: bool, jac: float):
    def _minimize(*args, **kwargs):
        return OptimizeResult(
            x=np.array([x]), success=success, jac=np.array([jac]), message="forced"
        )

    return _minimize


def test_tmle_failed_fluctuation_fit_is_not_converged(monkeypatch, caplog):
    y = rng.normal(size=40)
    data, nuis = _complete(y), _empirical_pair(y)
    monkeypatch.setattr(_estimators, "minimize", _forced_step(0.0, False, 1.0))
    _, _, diagnostics = tmle_missing(data, nuis, 0.5)
    assert diagnostics.final_epsilon == 0.0
    assert not diagnostics.converged
    assert "forced" in caplog.text


def test_tmle_rejected_step_is_not_converged(monkeypatch):
    y = rng.normal(size=40)
    data, nuis = _complete(y), _empirical_pair(y)
    monkeypatch.setattr(_estimators, "minimize", _forced_step(5.0, True, 0.0))
    _, tilted, diagnostics = tmle_missing(data, nuis, 0.5)
    assert diagnostics.final_epsilon == 0.0
    assert not diagnostics.converged
    assert np.allclose(tilted.weights, nuis.conditional_distribution.weights)


def test_tmle_solves_score_equation():
    theta, tilted, diagnostics = tmle_missing(data_mar, nuis_mar, 0.5)
    assert diagnostics.converged
    assert diagnostics.iterations <= 20
    assert abs(diagnostics.final_epsilon) <= 1e-4 * data_mar.n**-0.6
    assert np.isclose(diagnostics.score_bound, 5e-4 * data_mar.n**-0.6)
    assert diagnostics.score_residual <= diagnostics.score_bound
    assert abs(theta - 1.0) < 0.3


def test_tmle_likelihood_is_monotone_and_weights_positive():
    for q in (0.25, 0.75):
        _, tilted, diagnostics = tmle_missing(data_mar, nuis_mar, q)
        assert (np.diff([0.0, *diagnostics.loglik_trace]) >= 0).all()
        assert (tilted.weights > 0).all()


def test_fluctuation_objective_is_convex():
    from quantile_tmle._estimators import _fluctuation_objective

    local = np.random.default_rng(1)
    dq = local.normal(size=(30, 5))
    log_weights = np.log(np.full((30, 5), 0.2))
    do = local.normal(size=30)
    grid = np.linspace(-2.0, 2.0, 41)
    values = np.array([_fluctuation_objective(e, do, dq, log_weights)[0] for e in grid])
    assert (values[:-2] - 2 * values[1:-1] + values[2:] >= -1e-8).all()


def test_tmle_rejects_wrong_estimand():
    treated = Dataset(
        covariates=np.zeros((2, 1)), indicator=[1, 0], outcome=[1.0, 2.0], estimand="treated"
    )
    nuis = NuisancePair(
        propensity=[0.5, 0.5], conditional_distribution=make_uniform_grid([[0.0, 1.0]] * 2)
    )
    with pytest.raises(EstimationException):
        tmle_missing(treated, nuis, 0.5)
    with pytest.raises(EstimationException):
        tmle_att(_complete(np.array([1.0, 2.0])), nuis, 0.5)


def test_tmle_att_needs_treated_units():
    data = Dataset(
        covariates=np.zeros((3, 1)),
        indicator=[0, 0, 0],
        outcome=[1.0, 2.0, 3.0],
        estimand="treated",
    )
    nuis = NuisancePair(
        propensity=[0.5] * 3, conditional_distribution=make_uniform_grid([[0.0, 1.0]] * 3)
    )
    with pytest.raises(EstimationException):
        tmle_att(data, nuis, 0.5)


def test_tmle_att_recovers_counterfactual_quantile_among_treated():
    local = np.random.default_rng(8)
    n = 2000
    x = local.normal(size=(n, 1))
    t = local.binomial(1, expit(x[:, 0]))
    y = x[:, 0] + local.normal(size=n)
    data = Dataset(covariates=x, indicator=t, outcome=y, estimand="treated")
    propensity = fit_logistic(x, t).predict(x)
    model = fit_gaussian_regression(x[t == 0], y[t == 0])
    nuis = NuisancePair(
        propensity=clamp_propensity(propensity, "treated"),
        conditional_distribution=discretize_gaussian(model, x, 200),
        estimand="treated",
    )
    theta, _, diagnostics = tmle_att(data, nuis, 0.5)

    big = np.random.default_rng(9)
    x_big = big.normal(size=1_000_000)
    treated = big.uniform(size=x_big.size) < expit(x_big)
    truth = np.median(x_big[treated] + big.normal(size=int(treated.sum())))
    assert abs(theta - truth) < 0.25
    assert diagnostics.iterations <= 20


def test_identical_arms_give_zero_effect():
    data = Dataset(
        covariates=np.zeros((6, 1)),
        indicator=[1, 0, 1, 0, 1, 0],
        outcome=[1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
        estimand="treated",
    )
    nuis = NuisancePair(
        propensity=np.full(6, 0.5),
        conditional_distribution=make_uniform_grid(np.tile([1.0, 2.0, 2.5, 3.0], (6, 1))),
    )
    for name in ESTIMATOR_NAMES:
        assert effect_on_quantile(data, nuis, nuis, 0.5, name) == 0.0


def test_location_shift_moves_effect():
    local = np.random.default_rng(12)
    n = 400
    x = local.normal(size=(n, 1))
    t = local.binomial(1, expit(0.3 * x[:, 0]))
    y = 2.0 * x[:, 0] + local.normal(size=n)
    propensity = fit_logistic(x, t).predict(x)
    pairs = []
    for arm, p in ((1, propensity), (0, 1.0 - propensity)):
        model = fit_gaussian_regression(x[t == arm], y[t == arm])
        pairs.append(
            NuisancePair(
                propensity=clamp_propensity(p),
                conditional_distribution=discretize_gaussian(model, x, 100),
            )
        )
    data = Dataset(covariates=x, indicator=t, outcome=y, estimand="treated")
    shifted = Dataset(covariates=x, indicator=t, outcome=y + t, estimand="treated")
    shifted_1 = NuisancePair(
        propensity=pairs[0].propensity,
        conditional_distribution=make_uniform_grid(pairs[0].conditional_distribution.grid + 1.0),
    )
    for name in ("tmle", "od", "ipw"):
        before = effect_on_quantile(data, pairs[0], pairs[1], 0.5, name)
        after = effect_on_quantile(shifted, shifted_1, pairs[1], 0.5, name)
        assert abs(after - before - 1.0) < 0.05


def test_estimate_attributes_failures():
    data = _complete(np.array([1.0, 2.0, 3.0]))
    misaligned = _empirical_pair(np.array([1.0, 2.0]))
    with pytest.raises(EstimationException) as error:
        estimate(data, misaligned, 0.5, "aipw")
    assert error.value.estimator == "aipw"
    assert error.value.message.startswith("[aipw]")
    with pytest.raises(ValueError):
        estimate(data, misaligned, 0.5, "median")
