"""
Quantile estimators: the outcome-distribution plug-in, inverse probability weighting, the
weighted check-loss minimizer, the augmented estimating equation and the targeted estimator with
its exponential-tilting fluctuation. Each accepts either estimand.
"""

import logging
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from ._core import AtomIndex, clamp_propensity, invert_cdf, marginal_cdf, weighted_quantile
from .exceptions import EstimationException, TmleOptimizationError
from .models import Dataset, EstimatorName, GridDistribution, NuisancePair, TmleDiagnostics

logger = logging.getLogger("quantile_tmle")

MAX_ITER = 20
_SLACK = 1e-12
_GTOL = 1e-10
_GRADIENT_SLACK = 1e-7
SCORE_BOUND_FACTOR = 5e-4


class Weighting(NamedTuple):
    """
    The unit-level weights that turn one estimating equation into either estimand.

    **residual:** rᵢ, the weight of the residual 1{Yᵢ ≤ θ} − G(θ|Xᵢ).

    **unit:** ωᵢ, the weight of G(θ|Xᵢ) − q. Sums to one.

    **scale:** sᵢ, the clever covariate multiplier.

    **likelihood:** The mask of units whose outcome enters the fluctuation likelihood.

    **total:** The Horvitz-Thompson normalizer of inverse probability weighting.
    """

    residual: np.ndarray
    unit: np.ndarray
    scale: np.ndarray
    likelihood: np.ndarray
    total: float


class ArmEstimate(NamedTuple):
    theta: float
    distribution: GridDistribution
    diagnostics: TmleDiagnostics | None = None


def weighting(data: Dataset, propensity: np.ndarray) -> Weighting:
    """
    Build the weights of the estimating equation.

    For `missing`: rᵢ = Mᵢ/(n·êᵢ), ωᵢ = 1/n, sᵢ = 1/êᵢ, the likelihood runs over M = 1.
    For `treated`: rᵢ = (1 − Tᵢ)·êᵢ/(1 − êᵢ)/ΣT, ωᵢ = Tᵢ/ΣT, sᵢ = êᵢ/(1 − êᵢ), the likelihood
    runs over the controls.
    :param data: The dataset.
    :param propensity: ê at the sample rows.
    :return: The :py:class:`Weighting`.
    """
    propensity = np.asarray(propensity, dtype=float).ravel()
    if propensity.shape[0] != data.n:
        raise EstimationException(
            f"Propensity has {propensity.shape[0]} entries for {data.n} units."
        )
    indicator = data.indicator.astype(float)
    if data.estimand == "missing":
        if indicator.sum() == 0:
            raise EstimationException("No unit has an observed outcome.")
        e = clamp_propensity(propensity, "missing")
        return Weighting(
            residual=indicator / (data.n * e),
            unit=np.full(data.n, 1.0 / data.n),
            scale=1.0 / e,
            likelihood=indicator == 1,
            total=float(data.n),
        )
    treated = indicator.sum()
    if treated == 0:
        raise EstimationException("The effect on the treated needs at least one treated unit.")
    if treated == data.n:
        raise EstimationException("The effect on the treated needs at least one control unit.")
    e = clamp_propensity(propensity, "treated")
    odds = e / (1.0 - e)
    return Weighting(
        residual=(1.0 - indicator) * odds / treated,
        unit=indicator / treated,
        scale=odds,
        likelihood=indicator == 0,
        total=float(treated),
    )


def _check_aligned(data: Dataset, dist: GridDistribution) -> None:
    if dist.n != data.n:
        raise EstimationException(
            f"The conditional distribution has {dist.n} rows for {data.n} units."
        )


def estimate_od(data: Dataset, dist: GridDistribution, q: float) -> float:
    """
    The outcome-distribution plug-in: invert the marginal CDF averaged from Ĝ over all units
    (missing) or over the treated (effect on the treated).
    :param data: The dataset.
    :param dist: Ĝ at the sample rows.
    :param q: The quantile level.
    :return: θ̂.
    """
    _check_aligned(data, dist)
    unit_weights = None if data.estimand == "missing" else data.indicator.astype(float)
    return invert_cdf(marginal_cdf(dist, unit_weights), q)


def estimate_ipw(data: Dataset, propensity: np.ndarray, q: float) -> float:
    """
    The smallest observed outcome at which (1/total)·Σ hᵢ 1{Yᵢ ≤ θ} reaches q, with
    hᵢ = Mᵢ/êᵢ and total n, or hᵢ = (1 − Tᵢ)·êᵢ/(1 − êᵢ) and total ΣT.
    """
    weights = weighting(data, propensity)
    return weighted_quantile(data.outcome, weights.residual * weights.total, q, weights.total)


def estimate_firpo(data: Dataset, propensity: np.ndarray, q: float) -> float:
    """
    The minimizer of the inverse-probability-weighted check loss, i.e. the self-normalized
    weighted quantile of the observed outcomes.
    """
    weights = weighting(data, propensity)
    return weighted_quantile(data.outcome, weights.residual, q)


def estimate_aipw(data: Dataset, nuis: NuisancePair, q: float) -> float:
    """
    Solve the augmented estimating equation
    Ψ(θ) = Σ rᵢ(1{Yᵢ ≤ θ} − Ĝ(θ|Xᵢ)) + Σ ωᵢ Ĝ(θ|Xᵢ) − q
    over the pooled observed outcomes and grid atoms. Ψ is a step function that need not be
    monotone: among the points where it crosses zero from below, the one with the smallest |Ψ| is
    returned, ties going to the smaller θ. Without a crossing the largest candidate is returned
    and a warning is logged.
    :param data: The dataset.
    :param nuis: The nuisance pair.
    :param q: The quantile level.
    :return: θ̂.
    """
    if not 0 < q < 1:
        raise ValueError(f"The quantile level must lie in (0, 1), got {q}.")
    dist = nuis.conditional_distribution
    _check_aligned(data, dist)
    weights = weighting(data, nuis.propensity)
    observed = weights.residual > 0
    index = AtomIndex(np.concatenate([data.outcome[observed], dist.grid.ravel()]))
    jumps = np.concatenate(
        [
            weights.residual[observed],
            ((weights.unit - weights.residual)[:, None] * dist.weights).ravel(),
        ]
    )
    values = index.step_values(jumps) - q
    below = np.concatenate(([True], values[:-1] < -_SLACK))
    crossings = np.flatnonzero(below & (values >= -_SLACK))
    if crossings.size == 0:
        logger.warning(
            f"Augmented estimating equation has no sign change at q={q}; "
            "returning the largest candidate."
        )
        return float(index.locations[-1])
    best = crossings[np.argmin(np.abs(values[crossings]))]
    return float(index.locations[best])


def _fluctuation_objective(
    epsilon: float, do: np.ndarray, dq: np.ndarray, log_weights: np.ndarray
) -> tuple[float, np.ndarray]:
    tilted = epsilon * dq + log_weights
    normalizer = logsumexp(tilted, axis=1)
    value = -np.mean(epsilon * do - normalizer)
    gradient = -np.mean(do - np.sum(dq * np.exp(tilted - normalizer[:, None]), axis=1))
    return float(value), np.atleast_1d(gradient)


def _tmle(
    data: Dataset, nuis: NuisancePair, q: float, max_iter: int
) -> tuple[float, GridDistribution, TmleDiagnostics]:
    if not 0 < q < 1:
        raise ValueError(f"The quantile level must lie in (0, 1), got {q}.")
    dist = nuis.conditional_distribution
    _check_aligned(data, dist)
    weights = weighting(data, nuis.propensity)
    grid, mask = dist.grid, weights.likelihood
    index = AtomIndex(grid)
    with np.errstate(divide="ignore"):
        log_weights = np.log(dist.weights)
    y_observed = data.outcome[mask]
    tolerance = 1e-4 * data.n**-0.6
    score_bound = SCORE_BOUND_FACTOR * data.n**-0.6

    epsilon, stalled, step_failed, iteration, gain, trace = 0.0, False, False, 0, 0.0, []
    for iteration in range(1, max_iter + 1):
        current = np.exp(log_weights)
        theta = invert_cdf(index.cdf(weights.unit[:, None] * current), q)
        at_theta = ((grid <= theta) * current).sum(axis=1)
        dq = weights.scale[:, None] * ((grid <= theta) - at_theta[:, None])
        do = weights.scale[mask] * ((y_observed <= theta) - at_theta[mask])

        args = (do, dq[mask], log_weights[mask])
        result = minimize(
            _fluctuation_objective,
            x0=np.zeros(1),
            args=args,
            jac=True,
            method="BFGS",
            options={"gtol": _GTOL},
        )
        epsilon = float(result.x[0])
        if not np.isfinite(epsilon):
            raise TmleOptimizationError(iteration)
        step_failed = not result.success and abs(float(result.jac[0])) > _GRADIENT_SLACK
        if step_failed:
            logger.warning(f"TMLE iteration {iteration}: fluctuation fit failed: {result.message}")
        at_zero, _ = _fluctuation_objective(0.0, *args)
        at_epsilon, _ = _fluctuation_objective(epsilon, *args)
        if at_epsilon > at_zero:
            epsilon, at_epsilon, step_failed = 0.0, at_zero, True
        gain += at_zero - at_epsilon
        trace.append(gain)
        logger.debug(f"TMLE iteration {iteration}: theta={theta:.6g}, epsilon={epsilon:.3e}.")

        tilted = log_weights + epsilon * dq
        log_weights = tilted - logsumexp(tilted, axis=1, keepdims=True)
        if abs(epsilon) < tolerance:
            stalled = True
            break

    final = np.exp(log_weights)
    final /= final.sum(axis=1, keepdims=True)
    theta = invert_cdf(index.cdf(weights.unit[:, None] * final), q)
    at_theta = ((grid <= theta) * final).sum(axis=1)
    residual = (data.outcome <= theta) - at_theta
    score = np.sum(np.where(weights.residual > 0, weights.residual * residual, 0.0))
    score += np.sum(weights.unit * (at_theta - q))
    score = abs(float(score))
    converged = stalled and not step_failed and score <= score_bound
    if converged:
        logger.debug(f"TMLE converged after {iteration} iterations at theta={theta:.6g}.")
    elif not stalled:
        logger.warning(
            f"TMLE did not converge in {max_iter} iterations (last epsilon {epsilon:.3e})."
        )
    elif step_failed:
        logger.warning(f"TMLE stopped after a failed fluctuation fit at iteration {iteration}.")
    else:
        logger.warning(
            f"TMLE fluctuation vanished but the score {score:.3e} exceeds {score_bound:.3e}; "
            "the grid cannot place the marginal CDF at q."
        )
    diagnostics = TmleDiagnostics(
        iterations=iteration,
        final_epsilon=epsilon,
        score_residual=score,
        score_bound=score_bound,
        converged=converged,
        loglik_trace=trace,
    )
    return theta, GridDistribution(grid=grid, weights=final), diagnostics


def tmle_missing(
    data: Dataset, nuis: NuisancePair, q: float, max_iter: int = MAX_ITER
) -> tuple[float, GridDistribution, TmleDiagnostics]:
    """
    Targeted estimate of the q-quantile of an outcome missing at random.

    Each iteration inverts the marginal CDF of the current grid, forms the clever covariate
    H = (1/ê)(1{y ≤ θ} − G(θ|x)) at the observed outcomes and at every atom, fits the tilt ε by
    BFGS on the mean tilted log-likelihood of the observed units and reweights the grid by
    exp(ε·H). The loop stops once |ε| < 1e-4·n^-0.6 or after `max_iter` iterations. The run is
    reported as converged only if the loop stopped on ε, its last fluctuation fit succeeded and the
    final score residual is at most 5e-4·n^-0.6; the residual can stay above that bound when the
    tilted grid puts enough mass on one atom that the marginal CDF steps over q. Non-convergence is
    reported through the diagnostics and a warning, not raised.
    :param data: A `missing` dataset.
    :param nuis: The initial nuisance pair.
    :param q: The quantile level.
    :param max_iter: The iteration cap.
    :return: θ̂, the tilted grid and the :py:class:`TmleDiagnostics`.
    """
    if data.estimand != "missing":
        raise EstimationException("tmle_missing needs a 'missing' dataset.", estimator="tmle")
    return _tmle(data, nuis, q, max_iter)


def tmle_att(
    data: Dataset, nuis: NuisancePair, q: float, max_iter: int = MAX_ITER
) -> tuple[float, GridDistribution, TmleDiagnostics]:
    """
    Targeted estimate of the q-quantile of the control outcome among the treated. The loop is the
    one of :py:func:`tmle_missing` with the control units in the likelihood, the clever covariate
    scaled by ê/(1 − ê) and the marginal CDF averaged over the treated. `nuis` holds Ĝ(·|T=0, x)
    and ê = P(T = 1 | x).
    """
    if data.estimand != "treated":
        raise EstimationException("tmle_att needs a 'treated' dataset.", estimator="tmle")
    return _tmle(data, nuis, q, max_iter)


def _tmle_arm(data: Dataset, nuis: NuisancePair, q: float, max_iter: int) -> ArmEstimate:
    return ArmEstimate(*_tmle(data, nuis, q, max_iter))


_ESTIMATORS: dict[str, Callable[[Dataset, NuisancePair, float, int], ArmEstimate]] = {
    "tmle": _tmle_arm,
    "aipw": lambda d, n, q, _: ArmEstimate(estimate_aipw(d, n, q), n.conditional_distribution),
    "ipw": lambda d, n, q, _: ArmEstimate(
        estimate_ipw(d, n.propensity, q), n.conditional_distribution
    ),
    "firpo": lambda d, n, q, _: ArmEstimate(
        estimate_firpo(d, n.propensity, q), n.conditional_distribution
    ),
    "od": lambda d, n, q, _: ArmEstimate(
        estimate_od(d, n.conditional_distribution, q), n.conditional_distribution
    ),
}


def estimate(
    data: Dataset,
    nuis: NuisancePair,
    q: float,
    estimator: EstimatorName = "tmle",
    max_iter: int = MAX_ITER,
) -> ArmEstimate:
    """
    Run one estimator by name. Failures are re-raised as :py:class:`EstimationException`
    attributed to the estimator.
    :param data: The dataset, either estimand.
    :param nuis: The nuisance pair.
    :param q: The quantile level.
    :param estimator: One of "tmle", "aipw", "ipw", "firpo" or "od".
    :param max_iter: The TMLE iteration cap.
    :return: The :py:class:`ArmEstimate`; its distribution is the tilted grid for "tmle" and Ĝ
             otherwise.
    """
    if estimator not in _ESTIMATORS:
        raise ValueError(f"Unknown estimator '{estimator}'.")
    try:
        return _ESTIMATORS[estimator](data, nuis, q, max_iter)
    except EstimationException as error:
        if error.estimator is None:
            raise EstimationException(error.message, estimator=estimator) from error
        raise


def effect_on_quantile(
    data: Dataset,
    nuis_1: NuisancePair,
    nuis_0: NuisancePair,
    q: float,
    estimator: EstimatorName = "tmle",
    max_iter: int = MAX_ITER,
) -> float:
    """
    The quantile treatment effect θ₁ − θ₀, each arm estimated as a missing-outcome problem: arm 1
    observes the treated, arm 0 the controls.
    :param data: A `treated` dataset (indicator T, all outcomes observed).
    :param nuis_1: Ĝ(·|T=1, x) and P(T = 1 | x).
    :param nuis_0: Ĝ(·|T=0, x) and P(T = 0 | x).
    :param q: The quantile level.
    :param estimator: The estimator used in both arms.
    :param max_iter: The TMLE iteration cap.
    :return: The estimated effect.
    """
    if data.estimand != "treated":
        raise EstimationException("Effects need a 'treated' dataset.", estimator=estimator)
    theta_1 = estimate(data.arm(1), nuis_1, q, estimator, max_iter).theta
    theta_0 = estimate(data.arm(0), nuis_0, q, estimator, max_iter).theta
    return theta_1 - theta_0
