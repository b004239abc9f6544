import os
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import expit
from typing_extensions import Self

from .exceptions import InvalidDatasetException, InvalidGridException

EstimandKind = Literal["missing", "treated"]
EstimatorName = Literal["tmle", "aipw", "ipw", "firpo", "od"]
ScenarioName = Literal["a", "b", "c", "d"]

ESTIMATOR_NAMES: tuple[EstimatorName, ...] = ("tmle", "aipw", "ipw", "firpo", "od")
PROPENSITY_FLOOR = 1e-10


def _read_only(value, dtype=float) -> np.ndarray:
    array = np.array(value, dtype=dtype)
    array.setflags(write=False)
    return array


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)


class Dataset(_ArrayModel):
    """
    Object representing an observed sample, for either the missing-outcome or the
    effect-on-the-treated problem.

    **covariates (ndarray):** The n × p covariate matrix. p may be 0.

    **indicator (ndarray):** The binary indicator of length n. For `missing` this is M
    (1 = outcome observed), for `treated` it is the treatment T.

    **outcome (ndarray):** The outcome of length n. May be NaN where `indicator` is 0 for
    `missing`; must be finite everywhere for `treated`.

    **estimand (str):** One of "missing" or "treated".
    """

    covariates: np.ndarray
    indicator: np.ndarray
    outcome: np.ndarray
    estimand: EstimandKind = "missing"

    # noinspection PyNestedDecorators
    @field_validator("covariates", mode="before")
    @classmethod
    def _as_matrix(cls, inp) -> np.ndarray:
        array = np.array(inp, dtype=float)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        if array.ndim != 2:
            raise InvalidDatasetException("Covariates must be a 2-dimensional matrix.")
        array.setflags(write=False)
        return array

    # noinspection PyNestedDecorators
    @field_validator("indicator", mode="before")
    @classmethod
    def _as_binary(cls, inp) -> np.ndarray:
        array = np.asarray(inp, dtype=float).ravel()
        if not np.isin(array, (0.0, 1.0)).all():
            raise InvalidDatasetException("The indicator must only contain 0 and 1.")
        return _read_only(array, dtype=np.int8)

    # noinspection PyNestedDecorators
    @field_validator("outcome", mode="before")
    @classmethod
    def _as_vector(cls, inp) -> np.ndarray:
        return _read_only(np.asarray(inp, dtype=float).ravel())

    @model_validator(mode="after")
    def _check_contract(self) -> Self:
        n = self.indicator.shape[0]
        if n < 1:
            raise InvalidDatasetException("A dataset needs at least one unit.")
        if self.covariates.shape[0] != n or self.outcome.shape[0] != n:
            raise InvalidDatasetException(
                f"Covariates ({self.covariates.shape[0]} rows), indicator ({n}) and outcome "
                f"({self.outcome.shape[0]}) must have the same length."
            )
        if not np.isfinite(self.covariates).all():
            row, col = np.argwhere(~np.isfinite(self.covariates))[0]
            raise InvalidDatasetException(f"Non-finite covariate in row {row}, column {col}.")
        required = self.indicator == 1 if self.estimand == "missing" else np.ones(n, dtype=bool)
        bad = required & ~np.isfinite(self.outcome)
        if bad.any():
            raise InvalidDatasetException(
                f"Outcome must be finite for row {int(np.flatnonzero(bad)[0])} "
                f"(estimand '{self.estimand}')."
            )
        return self

    @property
    def n(self) -> int:
        return int(self.indicator.shape[0])

    @property
    def observed(self) -> np.ndarray:
        """
        Boolean mask of the units whose outcome enters the conditional distribution fit: M = 1
        for `missing`, T = 0 (the control arm) for `treated`.
        """
        return self.indicator == (1 if self.estimand == "missing" else 0)

    def arm(self, t: int) -> "Dataset":
        """
        The missing-outcome view of treatment arm `t`: the indicator becomes 1{T = t} and outcomes
        outside the arm are treated as missing.
        :param t: The arm, 0 or 1.
        :return: A `missing` Dataset over all n units.
        """
        indicator = (self.indicator == t).astype(np.int8)
        outcome = np.where(indicator == 1, self.outcome, np.nan)
        return Dataset(
            covariates=self.covariates, indicator=indicator, outcome=outcome, estimand="missing"
        )


class GridDistribution(_ArrayModel):
    """
    Object representing per-unit conditional outcome distributions as point masses on a grid of
    conditional quantiles.

    **grid (ndarray):** The n × K matrix of atom locations. Each row is nondecreasing.

    **weights (ndarray):** The n × K matrix of point masses. Each row lies on the simplex.
    """

    grid: np.ndarray
    weights: np.ndarray

    # noinspection PyNestedDecorators
    @field_validator("grid", "weights", mode="before")
    @classmethod
    def _as_matrix(cls, inp) -> np.ndarray:
        array = np.array(inp, dtype=float)
        if array.ndim == 1:
            array = array.reshape(1, -1)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check_contract(self) -> Self:
        if self.grid.ndim != 2 or self.grid.shape[0] < 1 or self.grid.shape[1] < 1:
            raise InvalidGridException("The grid must be a non-empty n × K matrix.")
        if self.weights.shape != self.grid.shape:
            raise InvalidGridException(
                f"Weights {self.weights.shape} and grid {self.grid.shape} must have equal shape."
            )
        if not np.isfinite(self.grid).all():
            raise InvalidGridException("The grid contains non-finite atoms.")
        unsorted = (np.diff(self.grid, axis=1) < 0).any(axis=1)
        if unsorted.any():
            raise InvalidGridException(
                f"Row {int(np.flatnonzero(unsorted)[0])} of the grid is not nondecreasing."
            )
        if (self.weights < 0).any():
            raise InvalidGridException("Weights must be nonnegative.")
        off_simplex = np.abs(self.weights.sum(axis=1) - 1.0) > 1e-12
        if off_simplex.any():
            raise InvalidGridException(
                f"Weights of row {int(np.flatnonzero(off_simplex)[0])} do not sum to one."
            )
        return self

    @property
    def n(self) -> int:
        return int(self.grid.shape[0])

    def conditional_cdf(self, y: float) -> np.ndarray:
        """
        Evaluate every unit's conditional CDF at `y`.
        :param y: The evaluation point.
        :return: The vector of Σₖ 1{Q[i,k] ≤ y}·w[i,k].
        """
        return ((self.grid <= y) * self.weights).sum(axis=1)


class MarginalCdf(_ArrayModel):
    """
    Object representing a marginal step-function CDF over a finite, merged set of atoms.

    **locations (ndarray):** The strictly increasing atom locations.

    **masses (ndarray):** The mass at each location.

    **cumulative (ndarray):** The CDF value at each location, clipped to [0, 1].
    """

    locations: np.ndarray
    masses: np.ndarray
    cumulative: np.ndarray

    @property
    def support_hint(self) -> tuple[float, float]:
        return float(self.locations[0]), float(self.locations[-1])

    def evaluate(self, y: float | np.ndarray) -> float | np.ndarray:
        """
        Evaluate the right-continuous CDF.
        :param y: A point or an array of points.
        :return: F(y) with the shape of `y`.
        """
        index = np.searchsorted(self.locations, y, side="right")
        padded = np.concatenate(([0.0], self.cumulative))
        return padded[index]


class NuisancePair(_ArrayModel):
    """
    Object representing fitted nuisance parameters η = (G, e), evaluated at the sample rows.

    **propensity (ndarray):** ê(Xᵢ) for every unit, already clamped.

    **conditional_distribution (GridDistribution):** Ĝ(·|Xᵢ) for every unit.

    **estimand (str):** The estimand the propensities are clamped for. Under "treated" they must
    stay below 1 − 1e-10 so that ê/(1 − ê) is finite.
    """

    propensity: np.ndarray
    conditional_distribution: GridDistribution
    estimand: EstimandKind = "missing"

    # noinspection PyNestedDecorators
    @field_validator("propensity", mode="before")
    @classmethod
    def _as_vector(cls, inp) -> np.ndarray:
        return _read_only(np.asarray(inp, dtype=float).ravel())

    @model_validator(mode="after")
    def _check_contract(self) -> Self:
        if self.propensity.shape[0] != self.conditional_distribution.n:
            raise InvalidDatasetException(
                f"Propensity ({self.propensity.shape[0]}) and conditional distribution "
                f"({self.conditional_distribution.n}) are not aligned."
            )
        upper = 1.0 if self.estimand == "missing" else 1.0 - PROPENSITY_FLOOR
        if (self.propensity < PROPENSITY_FLOOR).any() or (self.propensity > upper).any():
            raise InvalidDatasetException(
                f"Propensities must be clamped to [{PROPENSITY_FLOOR:g}, {upper!r}] for the "
                f"'{self.estimand}' estimand."
            )
        return self


class LogisticModel(_ArrayModel):
    """
    Object representing a fitted logistic regression.

    **coefficients (ndarray):** Intercept first, then one coefficient per covariate.

    **status (str):** One of "converged", "max_iter" or "separation".

    **iterations (int):** The number of IRLS iterations performed.
    """

    coefficients: np.ndarray
    status: Literal["converged", "max_iter", "separation"] = "converged"
    iterations: int = Field(0, ge=0)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def predict(self, covariates: np.ndarray) -> np.ndarray:
        design = np.column_stack([np.ones(len(covariates)), covariates])
        return expit(design @ self.coefficients)


class GaussianRegressionModel(_ArrayModel):
    """
    Object representing a linear regression with Gaussian residuals.

    **coefficients (ndarray):** Intercept first, then one coefficient per covariate.

    **residual_sd (float):** The residual standard deviation, floored at 1e-6.
    """

    coefficients: np.ndarray
    residual_sd: float = Field(gt=0)

    def predict(self, covariates: np.ndarray) -> np.ndarray:
        design = np.column_stack([np.ones(len(covariates)), covariates])
        return design @ self.coefficients


class BinScheme(_ArrayModel):
    """
    Object representing histogram bins for a hazard-factorized density.

    **boundaries (ndarray):** Strictly increasing β₀ < … < β_k.

    **c (float):** The slope of the cutting lines; 0 is equal-width, large is equal-area.

    **k (int):** The number of bins.
    """

    boundaries: np.ndarray
    c: float = Field(ge=0)
    k: int = Field(ge=1)

    # noinspection PyNestedDecorators
    @field_validator("boundaries", mode="before")
    @classmethod
    def _as_vector(cls, inp) -> np.ndarray:
        return _read_only(np.asarray(inp, dtype=float).ravel())

    @model_validator(mode="after")
    def _check_contract(self) -> Self:
        if self.boundaries.shape[0] != self.k + 1:
            raise InvalidGridException(f"{self.k} bins need {self.k + 1} boundaries.")
        if (np.diff(self.boundaries) <= 0).any():
            raise InvalidGridException("Bin boundaries must be strictly increasing.")
        return self

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.boundaries)


class StackedDensity(_ArrayModel):
    """
    Object representing a convex combination of fitted conditional density candidates.

    **candidates (list):** The candidates, each refitted on the full sample. Every candidate
    exposes `density(covariates, y)`, `cdf(covariates, points)` and `breakpoints`.

    **alpha (ndarray):** The simplex weights.

    **cv_risk (float):** The cross-validated negative log-likelihood of the mixture.

    **candidate_risks (ndarray):** The cross-validated risk of every single candidate.

    **converged (bool):** Whether the weight optimizer stopped before its iteration cap.
    """

    candidates: list[Any]
    alpha: np.ndarray
    cv_risk: float
    candidate_risks: np.ndarray
    converged: bool = True

    @model_validator(mode="after")
    def _check_simplex(self) -> Self:
        if len(self.candidates) != self.alpha.shape[0]:
            raise ValueError("One weight per candidate is required.")
        if (self.alpha < 0).any() or abs(self.alpha.sum() - 1.0) > 1e-10:
            raise ValueError("Stacking weights must lie on the simplex.")
        return self

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(np.concatenate([c.breakpoints for c in self.candidates]))

    def density(self, covariates: np.ndarray, y: np.ndarray) -> np.ndarray:
        return sum(a * c.density(covariates, y) for a, c in zip(self.alpha, self.candidates))

    def cdf(self, covariates: np.ndarray, points: np.ndarray) -> np.ndarray:
        return sum(a * c.cdf(covariates, points) for a, c in zip(self.alpha, self.candidates))


class TmleDiagnostics(BaseModel):
    """
    Object representing the state of a targeting loop at exit.

    **iterations (int):** The number of fluctuation updates performed.

    **final_epsilon (float):** The last fitted fluctuation parameter.

    **score_residual (float):** |ℙₙD| at exit, on the estimating-function scale.

    **score_bound (float):** The largest score residual a converged run may leave, 5e-4·n^-0.6.

    **converged (bool):** Whether |ε̂| fell below 1e-4·n^-0.6 before the iteration cap, the last
    fluctuation fit succeeded and the score residual is within `score_bound`.

    **loglik_trace (list):** The cumulative tilted log-likelihood gain after each update.
    """

    iterations: int = Field(ge=0)
    final_epsilon: float
    score_residual: float = Field(ge=0)
    score_bound: float = Field(gt=0)
    converged: bool
    loglik_trace: list[float] = Field([])


class EstimateReport(BaseModel):
    """
    Object representing a quantile (or quantile effect) estimate with Wald inference.

    **estimator (str):** The estimator that produced the estimate, if known.

    **q (float):** The quantile level.

    **theta_hat (float):** The point estimate.

    **std_error (float):** sd(EIF)/√n. None for estimators without a variance estimate.

    **ci_low (float), ci_high (float):** The Wald confidence interval.

    **density_at_theta (float):** The estimated marginal density f̂(θ̂).

    **degenerate (bool):** Whether the influence function had zero variance.

    **diagnostics (TmleDiagnostics):** Targeting diagnostics, for the TMLE only. For an effect these
    are the treated arm's.

    **control_diagnostics (TmleDiagnostics):** The control arm's targeting diagnostics, for TMLE
    effects only.
    """

    estimator: str | None = None
    q: float = Field(gt=0, lt=1)
    theta_hat: float
    std_error: float | None = Field(None, ge=0)
    ci_low: float | None = None
    ci_high: float | None = None
    density_at_theta: float | None = Field(None, gt=0)
    degenerate: bool = False
    diagnostics: TmleDiagnostics | None = None
    control_diagnostics: TmleDiagnostics | None = None

    @model_validator(mode="after")
    def _check_interval(self) -> Self:
        if self.ci_low is not None and self.ci_high is not None:
            if not self.ci_low <= self.theta_hat <= self.ci_high:
                raise ValueError("The confidence interval must contain the point estimate.")
        return self


class ScenarioSpec(BaseModel):
    """
    Object representing one Monte Carlo configuration.

    **n (int):** The sample size of every replication.

    **reps (int):** The number of replications.

    **scenario (str):** "a" both nuisances correct, "b" ê wrong, "c" Ĝ wrong, "d" both wrong.

    **q_levels (list):** The quantile levels to estimate.

    **grid_size (int):** K; each conditional distribution carries K−1 atoms.

    **seed (int):** The master seed, 0 ≤ seed < 2⁶⁴.

    **ci_level (float):** The Wald confidence level used for coverage.
    """

    n: int = Field(ge=1)
    reps: int = Field(1000, ge=1)
    scenario: ScenarioName = "a"
    q_levels: list[float] = Field([0.5], min_length=1)
    grid_size: int = Field(500, ge=2)
    seed: int = Field(20240601, ge=0, lt=2**64)
    ci_level: float = Field(0.95, gt=0, lt=1)

    # noinspection PyNestedDecorators
    @field_validator("q_levels")
    @classmethod
    def _levels_in_unit_interval(cls, inp: list[float]) -> list[float]:
        if any(not 0 < q < 1 for q in inp):
            raise ValueError("Quantile levels must lie in (0, 1).")
        return inp


class SimulationRow(BaseModel):
    """
    Object representing the aggregated performance of one estimator in one configuration.

    **scenario (str), n (int), q (float), estimator (str):** The cell identifiers.

    **bias (float), sd (float), rmse (float):** Monte Carlo bias, population SD and √MSE of the
    effect estimates against the true effect.

    **coverage (float):** The share of Wald intervals covering the truth, where available.

    **mean_iterations (float):** The mean number of targeting updates per arm, averaged over both
    arms, TMLE only.

    **converged_share (float):** The share of replications in which the targeting loop converged
    in both arms, TMLE only.

    **reps (int):** The number of successful replications.

    **failures (int):** The number of replications where the estimator failed.

    **sd_defined (bool):** False when fewer than two replications succeeded.
    """

    scenario: ScenarioName
    n: int
    q: float
    estimator: EstimatorName
    bias: float
    sd: float
    rmse: float
    coverage: float | None = None
    mean_iterations: float | None = None
    converged_share: float | None = Field(None, ge=0, le=1)
    reps: int = Field(ge=0)
    failures: int = Field(ge=0)
    sd_defined: bool = True


class SimulationSummary(BaseModel):
    """
    Object representing the rows of a Monte Carlo run, grouped by quantile level in estimator order.

    **rows (list):** The list of rows, see :py:class:`SimulationRow`.
    """

    rows: list[SimulationRow] = Field([])

    @property
    def failure_rate(self) -> float:
        attempts = sum(row.reps + row.failures for row in self.rows)
        return sum(row.failures for row in self.rows) / attempts if attempts else 0.0

    def row(self, estimator: str, scenario: str | None = None, q: float | None = None):
        """
        Look up a single row.
        :param estimator: The estimator name.
        :param scenario: The scenario, if the summary spans several.
        :param q: The quantile level, if the summary spans several.
        :return: The first matching :py:class:`SimulationRow`.
        """
        for row in self.rows:
            if row.estimator != estimator:
                continue
            if scenario is not None and row.scenario != scenario:
                continue
            if q is not None and abs(row.q - q) > 1e-12:
                continue
            return row
        raise KeyError(f"No row for estimator '{estimator}'.")


class RunConfig(BaseModel):
    """
    Object representing a command-line run. Loaded from an optional JSON file, then overridden by
    explicitly passed flags.
    """

    command: Literal["estimate", "simulate", "report"]
    input_path: str | None = None
    q_levels: list[float] = Field([0.5], min_length=1)
    estimand: EstimandKind | None = None
    estimators: list[EstimatorName] = Field(list(ESTIMATOR_NAMES), min_length=1)
    outcome_model: Literal["gaussian", "stacked"] = "gaussian"
    scenario: Literal["a", "b", "c", "d", "all"] = "all"
    seed: int = Field(20240601, ge=0, lt=2**64)
    reps: int = Field(1000, ge=1)
    n: list[int] = Field([100, 500], min_length=1)
    grid_size: int = Field(500, ge=2)
    workers: int = Field(4, ge=1)
    ci_level: float = Field(0.95, gt=0, lt=1)
    output_format: Literal["csv", "json"] = "csv"
    output_path: str | None = None

    # noinspection PyNestedDecorators
    @field_validator("q_levels")
    @classmethod
    def _levels_in_unit_interval(cls, inp: list[float]) -> list[float]:
        if any(not 0 < q < 1 for q in inp):
            raise ValueError("Quantile levels must lie in (0, 1).")
        return inp

    @model_validator(mode="after")
    def _input_exists(self) -> Self:
        if self.command in ("estimate", "report"):
            if not self.input_path or not os.path.isfile(self.input_path):
                raise ValueError(f"Input file '{self.input_path}' does not exist.")
        return self
