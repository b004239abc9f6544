"""
Influence-function based standard errors, Wald intervals and the Wald test of no quantile effect.
"""

import logging

import numpy as np
from scipy.stats import gaussian_kde, norm

from ._core import marginal_cdf
from ._estimators import MAX_ITER, ArmEstimate, estimate, weighting
from .exceptions import InferenceException
from .models import (
    Dataset,
    EstimateReport,
    EstimatorName,
    GridDistribution,
    MarginalCdf,
    NuisancePair,
    TmleDiagnostics,
)

logger = logging.getLogger("quantile_tmle")

DENSITY_FLOOR = 1e-8


def _check_density(f_theta: float) -> None:
    if not f_theta > 0:
        raise InferenceException(f"The density at theta must be positive, got {f_theta}.")


def _plug_in_eif(
    data: Dataset,
    propensity: np.ndarray,
    dist: GridDistribution,
    theta: float,
    q: float,
    f_theta: float,
) -> np.ndarray:
    _check_density(f_theta)
    weights = weighting(data, propensity)
    at_theta = dist.conditional_cdf(theta)
    residual = np.where(weights.residual > 0, (data.outcome <= theta) - at_theta, 0.0)
    # n·(rᵢ·residual + ωᵢ·(G − q)) is the per-unit estimating function of either estimand.
    return -data.n * (weights.residual * residual + weights.unit * (at_theta - q)) / f_theta


def eif_missing(
    data: Dataset, nuis: NuisancePair, theta: float, q: float, f_theta: float
) -> np.ndarray:
    """
    The efficient influence function of the q-quantile of an outcome missing at random,
    D = −(1/f(θ))·[(M/ê)(1{Y ≤ θ} − G(θ|X)) + G(θ|X) − q], evaluated at every unit.
    :param data: A `missing` dataset.
    :param nuis: The nuisance pair the EIF is evaluated at.
    :param theta: The quantile.
    :param q: The level.
    :param f_theta: The marginal outcome density at `theta`.
    :return: The vector of EIF values.
    """
    if data.estimand != "missing":
        raise InferenceException("eif_missing needs a 'missing' dataset.")
    return _plug_in_eif(data, nuis.propensity, nuis.conditional_distribution, theta, q, f_theta)


def eif_att(
    data: Dataset,
    nuis: NuisancePair,
    theta: float,
    q: float,
    f_theta: float,
    p_treated: float | None = None,
) -> np.ndarray:
    """
    The efficient influence function of the q-quantile of the control outcome among the treated,
    D = −(1/(P(T=1)·f(θ)))·[(1 − T)·ê/(1 − ê)·(1{Y ≤ θ} − G(θ|0,X)) + T·(G(θ|0,X) − q)].
    :param data: A `treated` dataset.
    :param nuis: Ĝ(·|T=0, x) and ê = P(T = 1 | x).
    :param theta: The quantile.
    :param q: The level.
    :param f_theta: The density at `theta`.
    :param p_treated: P(T = 1); defaults to the sample treated fraction.
    :return: The vector of EIF values.
    """
    if data.estimand != "treated":
        raise InferenceException("eif_att needs a 'treated' dataset.")
    treated_fraction = float(data.indicator.mean())
    if p_treated is None:
        p_treated = treated_fraction
    if not 0 < p_treated < 1:
        raise InferenceException(f"The treated fraction must lie in (0, 1), got {p_treated}.")
    values = _plug_in_eif(
        data, nuis.propensity, nuis.conditional_distribution, theta, q, f_theta
    )
    return values * treated_fraction / p_treated


def density_at(cdf: MarginalCdf, theta: float, data: Dataset | None = None) -> float:
    """
    Gaussian kernel estimate of the marginal outcome density at `theta`, built on the atoms of
    `cdf` weighted by their masses with bandwidth 1.06·σ̂·n^(-1/5). n is the number of units in
    `data`, or the number of atoms without it. Values are floored at 1e-8.
    :param cdf: The marginal CDF whose atoms carry the kernel centres.
    :param theta: The evaluation point.
    :param data: The dataset the marginal was estimated from.
    :return: f̂(θ) > 0.
    """
    keep = cdf.masses > 0
    atoms, masses = cdf.locations[keep], cdf.masses[keep]
    if atoms.size < 2 or np.ptp(atoms) == 0:
        logger.warning("Marginal distribution has a single atom; using the density floor.")
        return DENSITY_FLOOR
    n = data.n if data is not None else atoms.size
    kde = gaussian_kde(atoms, bw_method=1.06 * n**-0.2, weights=masses / masses.sum())
    return max(float(kde(theta)[0]), DENSITY_FLOOR)


def wald_report(
    theta_hat: float,
    eif_values: np.ndarray,
    level: float = 0.95,
    q: float = 0.5,
    estimator: str | None = None,
    density_at_theta: float | None = None,
    diagnostics: TmleDiagnostics | None = None,
) -> EstimateReport:
    """
    Wald interval θ̂ ± z·SE with SE = sd(D)/√n and z the (1 + level)/2 normal quantile. A zero
    variance collapses the interval to the point and flags the report as degenerate.
    :param theta_hat: The point estimate.
    :param eif_values: The plug-in influence function at every unit, at least two.
    :param level: The confidence level.
    :param q: The quantile level the estimate refers to.
    :param estimator: The estimator name carried into the report.
    :param density_at_theta: f̂(θ) carried into the report.
    :param diagnostics: TMLE diagnostics carried into the report.
    :return: The :py:class:`EstimateReport`.
    """
    eif_values = np.asarray(eif_values, dtype=float).ravel()
    if eif_values.size < 2:
        raise InferenceException("A standard error needs at least two influence values.")
    if not np.isfinite(eif_values).all():
        raise InferenceException("Influence function values must be finite.")
    if not 0 < level < 1:
        raise ValueError(f"The confidence level must lie in (0, 1), got {level}.")
    std_error = float(np.std(eif_values, ddof=1) / np.sqrt(eif_values.size))
    degenerate = std_error == 0.0
    if degenerate:
        logger.warning(f"Influence function has zero variance; the interval at q={q} collapses.")
    half_width = float(norm.ppf((1.0 + level) / 2.0)) * std_error
    return EstimateReport(
        estimator=estimator,
        q=q,
        theta_hat=theta_hat,
        std_error=std_error,
        ci_low=theta_hat - half_width,
        ci_high=theta_hat + half_width,
        density_at_theta=density_at_theta,
        degenerate=degenerate,
        diagnostics=diagnostics,
    )


def _arm_influence(
    data: Dataset, nuis: NuisancePair, fit: ArmEstimate, q: float
) -> tuple[np.ndarray, float]:
    unit_weights = None if data.estimand == "missing" else data.indicator.astype(float)
    f_theta = density_at(marginal_cdf(fit.distribution, unit_weights), fit.theta, data)
    eif = _plug_in_eif(data, nuis.propensity, fit.distribution, fit.theta, q, f_theta)
    return eif, f_theta


def quantile_report(
    data: Dataset,
    nuis: NuisancePair,
    q: float,
    estimator: EstimatorName = "tmle",
    level: float = 0.95,
    max_iter: int = MAX_ITER,
) -> EstimateReport:
    """
    Estimate the q-quantile and attach a Wald interval. The influence function is evaluated at the
    tilted grid for "tmle" and at Ĝ for the other estimators; f(θ) is estimated from the same
    grid by :py:func:`density_at`.
    :param data: The dataset, either estimand.
    :param nuis: The nuisance pair.
    :param q: The quantile level.
    :param estimator: The estimator name.
    :param level: The confidence level.
    :param max_iter: The TMLE iteration cap.
    :return: The :py:class:`EstimateReport`.
    """
    fit = estimate(data, nuis, q, estimator, max_iter)
    eif, f_theta = _arm_influence(data, nuis, fit, q)
    return wald_report(fit.theta, eif, level, q, estimator, f_theta, fit.diagnostics)


def effect_report(
    data: Dataset,
    nuis_1: NuisancePair,
    nuis_0: NuisancePair,
    q: float,
    estimator: EstimatorName = "tmle",
    level: float = 0.95,
    max_iter: int = MAX_ITER,
) -> EstimateReport:
    """
    Estimate the quantile effect θ₁ − θ₀ with a Wald interval whose standard error is the sample
    standard deviation of the unit-level difference of the two arms' influence functions.
    :param data: A `treated` dataset.
    :param nuis_1: Ĝ(·|T=1, x) and P(T = 1 | x).
    :param nuis_0: Ĝ(·|T=0, x) and P(T = 0 | x).
    :param q: The quantile level.
    :param estimator: The estimator used in both arms.
    :param level: The confidence level.
    :param max_iter: The TMLE iteration cap.
    :return: The :py:class:`EstimateReport` of the effect. For "tmle", `diagnostics` holds the
             treated arm's targeting diagnostics and `control_diagnostics` the control arm's.
    """
    if data.estimand != "treated":
        raise InferenceException("Effects need a 'treated' dataset.")
    arm_1, arm_0 = data.arm(1), data.arm(0)
    fit_1 = estimate(arm_1, nuis_1, q, estimator, max_iter)
    fit_0 = estimate(arm_0, nuis_0, q, estimator, max_iter)
    eif_1, _ = _arm_influence(arm_1, nuis_1, fit_1, q)
    eif_0, _ = _arm_influence(arm_0, nuis_0, fit_0, q)
    report = wald_report(
        fit_1.theta - fit_0.theta, eif_1 - eif_0, level, q, estimator, None, fit_1.diagnostics
    )
    return report.model_copy(update={"control_diagnostics": fit_0.diagnostics})


def wald_test_effect(
    report: EstimateReport, reference: EstimateReport | float = 0.0
) -> tuple[float, float]:
    """
    Two-sided Wald test. Against a number, `report` is taken as an effect estimate and tested
    against that value. Against another report, the difference of the two estimates is tested
    with SE = sqrt(SE₁² + SE₀²), i.e. the arms are taken as independent.
    :param report: The effect or treated-arm report.
    :param reference: The null value, or the control-arm report.
    :return: The z statistic and its two-sided p-value.
    """
    if report.std_error is None:
        raise InferenceException("The report carries no standard error.")
    if isinstance(reference, EstimateReport):
        if reference.std_error is None:
            raise InferenceException("The reference report carries no standard error.")
        effect = report.theta_hat - reference.theta_hat
        std_error = float(np.hypot(report.std_error, reference.std_error))
    else:
        effect = report.theta_hat - float(reference)
        std_error = report.std_error
    if effect == 0.0:
        return 0.0, 1.0
    if std_error == 0.0:
        raise InferenceException("A nonzero effect with zero standard error cannot be tested.")
    z = effect / std_error
    return float(z), float(2.0 * norm.sf(abs(z)))
