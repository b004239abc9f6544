"""
Monte Carlo harness on the Kang-Schafer design: latent normal covariates W, observed nonlinear
transformations X, a logistic treatment and a linear outcome. Nuisance models are correctly
specified when fitted on W and misspecified when fitted on X.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from ._core import clamp_propensity
from ._estimators import MAX_ITER, effect_on_quantile
from ._inference import effect_report, wald_test_effect
from ._nuisance import discretize_gaussian, fit_gaussian_regression, fit_logistic
from .exceptions import QuantileTmleException
from .models import (
    ESTIMATOR_NAMES,
    Dataset,
    EstimatorName,
    NuisancePair,
    ScenarioName,
    ScenarioSpec,
    SimulationRow,
    SimulationSummary,
)

logger = logging.getLogger("quantile_tmle")

OUTCOME_COEFFICIENTS = np.array([210.0, 27.4, 13.7, 13.7, 13.7])
PROPENSITY_COEFFICIENTS = np.array([-1.0, 0.5, -0.25, -0.1])
KS_EFFECT = 0.0

# (propensity covariates, outcome covariates) per scenario.
SCENARIOS: dict[ScenarioName, tuple[str, str]] = {
    "a": ("w", "w"),
    "b": ("x", "w"),
    "c": ("w", "x"),
    "d": ("x", "x"),
}
_WITH_INTERVALS: tuple[EstimatorName, ...] = ("tmle", "aipw")


class KangSchaferSample(NamedTuple):
    w: np.ndarray
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def dataset(self) -> Dataset:
        return Dataset(covariates=self.x, indicator=self.t, outcome=self.y, estimand="treated")


def generate_ks(n: int, rng: np.random.Generator) -> KangSchaferSample:
    """
    Draw n units: W ~ N(0, I₄), T ~ Bernoulli(expit(−W₁ + 0.5W₂ − 0.25W₃ − 0.1W₄)),
    Y = 210 + 27.4W₁ + 13.7(W₂ + W₃ + W₄) + N(0, 1), with the observed covariates
    X = (exp(W₁/2), W₂/(1 + exp(W₁)) + 10, (W₁W₃/25 + 0.6)³, (W₂ + W₄ + 20)²).
    :param n: The sample size.
    :param rng: The generator to draw from.
    :return: The :py:class:`KangSchaferSample`.
    """
    if n < 1:
        raise ValueError(f"The sample size must be positive, got {n}.")
    w = rng.standard_normal((n, 4))
    y = np.column_stack([np.ones(n), w]) @ OUTCOME_COEFFICIENTS + rng.standard_normal(n)
    t = rng.binomial(1, expit(w @ PROPENSITY_COEFFICIENTS))
    x = np.column_stack(
        [
            np.exp(w[:, 0] / 2.0),
            w[:, 1] / (1.0 + np.exp(w[:, 0])) + 10.0,
            (w[:, 0] * w[:, 2] / 25.0 + 0.6) ** 3,
            (w[:, 1] + w[:, 3] + 20.0) ** 2,
        ]
    )
    return KangSchaferSample(w=w, x=x, t=t, y=y)


def ks_truth(q: float) -> float:
    """
    The q-quantile of either potential outcome, 210 + sqrt(27.4² + 3·13.7² + 1)·Φ⁻¹(q). Both arms
    share it, so the quantile effect is 0 at every level.
    """
    scale = np.sqrt(np.sum(OUTCOME_COEFFICIENTS[1:] ** 2) + 1.0)
    return float(OUTCOME_COEFFICIENTS[0] + scale * norm.ppf(q))


def fit_scenario(
    sample: KangSchaferSample, scenario: ScenarioName, grid_size: int = 500
) -> tuple[NuisancePair, NuisancePair]:
    """
    Fit the nuisance pairs of both arms. The propensity is a logistic regression of T on all
    units, the outcome a linear-Gaussian regression fitted within each arm and discretized on all
    units. Correct models use W, misspecified ones X.
    :param sample: The sample.
    :param scenario: "a" (both correct), "b" (ê wrong), "c" (Ĝ wrong) or "d" (both wrong).
    :param grid_size: K.
    :return: The pairs for arm 1 (with P(T=1|x)) and arm 0 (with P(T=0|x)).
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"Unknown scenario '{scenario}'.")
    propensity_on, outcome_on = (getattr(sample, name) for name in SCENARIOS[scenario])
    propensity = fit_logistic(propensity_on, sample.t).predict(propensity_on)
    pairs = []
    for arm, arm_propensity in ((1, propensity), (0, 1.0 - propensity)):
        in_arm = sample.t == arm
        model = fit_gaussian_regression(outcome_on[in_arm], sample.y[in_arm])
        pairs.append(
            NuisancePair(
                propensity=clamp_propensity(arm_propensity),
                conditional_distribution=discretize_gaussian(model, outcome_on, grid_size),
            )
        )
    return pairs[0], pairs[1]


class _Outcome(NamedTuple):
    estimate: float | None
    covered: bool | None = None
    iterations: float | None = None
    converged: bool | None = None


def _replicate(
    spec: ScenarioSpec, seed: np.random.SeedSequence, index: int
) -> dict[tuple[float, str], _Outcome]:
    failed = {(q, name): _Outcome(None) for q in spec.q_levels for name in ESTIMATOR_NAMES}
    sample = generate_ks(spec.n, np.random.default_rng(seed))
    try:
        nuis_1, nuis_0 = fit_scenario(sample, spec.scenario, spec.grid_size)
    except (QuantileTmleException, ValueError) as error:
        logger.warning(f"Replication {index}: nuisance fit failed: {error}")
        return failed
    data = sample.dataset()
    outcomes = {}
    for q in spec.q_levels:
        for name in ESTIMATOR_NAMES:
            try:
                if name in _WITH_INTERVALS:
                    report = effect_report(data, nuis_1, nuis_0, q, name, spec.ci_level, MAX_ITER)
                    arms = [report.diagnostics, report.control_diagnostics]
                    iterations = converged = None
                    if all(arm is not None for arm in arms):
                        iterations = float(np.mean([arm.iterations for arm in arms]))
                        converged = all(arm.converged for arm in arms)
                    outcomes[(q, name)] = _Outcome(
                        estimate=report.theta_hat,
                        covered=report.ci_low <= KS_EFFECT <= report.ci_high,
                        iterations=iterations,
                        converged=converged,
                    )
                else:
                    outcomes[(q, name)] = _Outcome(
                        effect_on_quantile(data, nuis_1, nuis_0, q, name)
                    )
            except QuantileTmleException as error:
                logger.warning(f"Replication {index}, q={q}: {error.message}")
                outcomes[(q, name)] = failed[(q, name)]
    return outcomes


def _aggregate(
    spec: ScenarioSpec, results: list[dict[tuple[float, str], _Outcome]]
) -> SimulationSummary:
    rows = []
    for q in spec.q_levels:
        for name in ESTIMATOR_NAMES:
            outcomes = [result[(q, name)] for result in results]
            estimates = np.array([o.estimate for o in outcomes if o.estimate is not None])
            reps, failures = estimates.size, len(outcomes) - estimates.size
            errors = estimates - KS_EFFECT
            coverage = mean_iterations = converged_share = None
            if reps and name in _WITH_INTERVALS:
                coverage = float(np.mean([o.covered for o in outcomes if o.covered is not None]))
            if reps and name == "tmle":
                targeted = [o for o in outcomes if o.iterations is not None]
                mean_iterations = float(np.mean([o.iterations for o in targeted]))
                converged_share = float(np.mean([o.converged for o in targeted]))
            rows.append(
                SimulationRow(
                    scenario=spec.scenario,
                    n=spec.n,
                    q=q,
                    estimator=name,
                    bias=float(errors.mean()) if reps else 0.0,
                    sd=float(errors.std()) if reps else 0.0,
                    rmse=float(np.sqrt(np.mean(errors**2))) if reps else 0.0,
                    coverage=coverage,
                    mean_iterations=mean_iterations,
                    converged_share=converged_share,
                    reps=reps,
                    failures=failures,
                    sd_defined=reps > 1,
                )
            )
    return SimulationSummary(rows=rows)


def run_monte_carlo(spec: ScenarioSpec, workers: int = 4) -> SimulationSummary:
    """
    Replicate the design `spec.reps` times and summarize the effect estimates of all five
    estimators against the true effect 0.

    Replication i draws from the i-th child of `SeedSequence(spec.seed)`, so results do not depend
    on `workers`, and scenarios run with the same seed share their datasets. Estimator failures
    are counted per row and excluded from the moments. The standard deviation uses the population
    formula, so rmse² = bias² + sd².
    :param spec: The :py:class:`ScenarioSpec`.
    :param workers: Threads running replications concurrently.
    :return: The :py:class:`SimulationSummary`, estimators in the order tmle, aipw, ipw, firpo, od
             within each quantile level.
    """
    logger.info(
        f"Running {spec.reps} replications of scenario ({spec.scenario}) at n={spec.n} "
        f"with {workers} workers."
    )
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.reps)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_replicate, [spec] * spec.reps, seeds, range(spec.reps)))
    else:
        results = [_replicate(spec, seed, index) for index, seed in enumerate(seeds)]
    summary = _aggregate(spec, results)
    logger.info(
        f"Finished scenario ({spec.scenario}) at n={spec.n}; "
        f"failure rate {summary.failure_rate:.2%}."
    )
    return summary


def shift_power(
    n: int = 500,
    delta: float = 1.0,
    reps: int = 200,
    seed: int = 20240601,
    q: float = 0.5,
    level: float = 0.95,
    scenario: ScenarioName = "a",
    grid_size: int = 500,
    workers: int = 4,
) -> float:
    """
    Rejection rate of the Wald test of no quantile effect when treated outcomes are shifted by
    `delta`, using the targeted estimator in both arms.
    :param n: The sample size.
    :param delta: The location shift added to treated outcomes.
    :param reps: The number of replications.
    :param seed: The master seed.
    :param q: The quantile level.
    :param level: The test is run at size 1 − `level`.
    :param scenario: The modeling scenario.
    :param grid_size: K.
    :param workers: Threads running replications concurrently.
    :return: The share of successful replications that reject.
    """

    def _reject(child: np.random.SeedSequence) -> bool | None:
        sample = generate_ks(n, np.random.default_rng(child))
        sample = sample._replace(y=sample.y + delta * sample.t)
        try:
            nuis_1, nuis_0 = fit_scenario(sample, scenario, grid_size)
            report = effect_report(sample.dataset(), nuis_1, nuis_0, q, "tmle", level)
        except QuantileTmleException as error:
            logger.warning(f"Power replication failed: {error.message}")
            return None
        _, p_value = wald_test_effect(report, 0.0)
        return p_value < 1.0 - level

    seeds = np.random.SeedSequence(seed).spawn(reps)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        decisions = [d for d in executor.map(_reject, seeds) if d is not None]
    if not decisions:
        raise QuantileTmleException("Every power replication failed.")
    return float(np.mean(decisions))
