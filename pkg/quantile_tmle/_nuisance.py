"""
Parametric nuisance estimators: a logistic propensity fitted by IRLS and a linear-Gaussian outcome
distribution discretized onto a quantile grid.
"""

import logging

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.stats import norm

from ._core import uniform_grid
from .exceptions import SingularDesignException
from .models import GaussianRegressionModel, GridDistribution, LogisticModel

logger = logging.getLogger("quantile_tmle")

RESIDUAL_SD_FLOOR = 1e-6
_SEPARATION_BOUND = 1e3
_IRLS_WEIGHT_FLOOR = 1e-10


def _design(covariates: np.ndarray) -> np.ndarray:
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(-1, 1)
    return np.column_stack([np.ones(covariates.shape[0]), covariates])


def _check_design(design: np.ndarray, column_names: list[str] | None) -> None:
    n, width = design.shape
    if n <= width:
        raise SingularDesignException(
            f"Need more units than parameters, got n={n} for {width} coefficients."
        )
    names = ["intercept"] + (column_names or [f"x{j}" for j in range(1, width)])
    if np.linalg.matrix_rank(design) == width:
        return
    collinear, rank = [], 0
    for j in range(width):
        new_rank = np.linalg.matrix_rank(design[:, : j + 1])
        if new_rank == rank:
            collinear.append(names[j])
        rank = new_rank
    raise SingularDesignException(
        f"Design matrix is rank deficient; collinear columns: {', '.join(collinear)}."
    )


def _bernoulli_loglik(design: np.ndarray, t: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    return float(np.sum(t * eta - np.logaddexp(0.0, eta)))


def fit_logistic(
    covariates: np.ndarray,
    t: np.ndarray,
    max_iter: int = 100,
    tol: float = 1e-8,
    column_names: list[str] | None = None,
) -> LogisticModel:
    """
    Fit a logistic regression with an intercept by iteratively reweighted least squares. Each
    Newton step is halved until the log-likelihood does not decrease.

    The fit stops when the mean score max|Xᵀ(t − p)|/n drops to `tol`. If a coefficient exceeds
    1e3 in absolute value, or the fitted probabilities reproduce `t` exactly, the data are
    separated: the last iterate is returned with status "separation" and a warning is logged.
    :param covariates: The n × p covariate matrix.
    :param t: The binary response.
    :param max_iter: The maximum number of IRLS iterations.
    :param tol: The tolerance on the mean score.
    :param column_names: Names used when reporting collinear columns.
    :return: The fitted :py:class:`LogisticModel`.
    """
    design = _design(covariates)
    t = np.asarray(t, dtype=float).ravel()
    if t.min() == t.max():
        raise ValueError("The response of a logistic fit must not be constant.")
    _check_design(design, column_names)
    n = design.shape[0]

    beta = np.zeros(design.shape[1])
    loglik = _bernoulli_loglik(design, t, beta)
    status, iteration = "max_iter", 0
    for iteration in range(1, max_iter + 1):
        p = expit(design @ beta)
        score = design.T @ (t - p)
        if np.max(np.abs(score)) / n <= tol:
            status = "converged"
            break
        if np.max(np.abs(beta)) > _SEPARATION_BOUND:
            status = "separation"
            break
        weights = np.maximum(p * (1.0 - p), _IRLS_WEIGHT_FLOOR)
        gram = (design * weights[:, None]).T @ design
        try:
            step = linalg.solve(gram, score, assume_a="pos")
        except linalg.LinAlgError as error:
            raise SingularDesignException(
                f"Weighted Gram matrix is singular at IRLS iteration {iteration}."
            ) from error
        factor = 1.0
        for _ in range(30):
            candidate = beta + factor * step
            candidate_loglik = _bernoulli_loglik(design, t, candidate)
            if candidate_loglik >= loglik - 1e-12 * abs(loglik):
                break
            factor /= 2.0
        beta, loglik = candidate, candidate_loglik

    if status != "separation" and np.all(np.abs(t - expit(design @ beta)) < 1e-6):
        status = "separation"
    if status == "separation":
        logger.warning(f"Logistic fit is separated; coefficients {np.round(beta, 3).tolist()}.")
    elif status == "max_iter":
        logger.warning(f"Logistic fit did not converge in {max_iter} iterations.")
    return LogisticModel(coefficients=beta, status=status, iterations=iteration)


def fit_gaussian_regression(
    covariates: np.ndarray, y: np.ndarray, column_names: list[str] | None = None
) -> GaussianRegressionModel:
    """
    Fit ordinary least squares with an intercept. The residual standard deviation uses the
    n − p − 1 denominator and is floored at 1e-6.
    :param covariates: The n × p covariate matrix.
    :param y: The outcome.
    :param column_names: Names used when reporting collinear columns.
    :return: The fitted :py:class:`GaussianRegressionModel`.
    """
    design = _design(covariates)
    y = np.asarray(y, dtype=float).ravel()
    _check_design(design, column_names)
    beta, *_ = linalg.lstsq(design, y)
    residuals = y - design @ beta
    dof = design.shape[0] - design.shape[1]
    residual_sd = max(float(np.sqrt(residuals @ residuals / dof)), RESIDUAL_SD_FLOOR)
    return GaussianRegressionModel(coefficients=beta, residual_sd=residual_sd)


def quantile_levels(grid_size: int) -> np.ndarray:
    """
    The levels 1/K, 2/K, …, (K−1)/K at which conditional distributions are discretized.
    """
    if grid_size < 2:
        raise ValueError(f"The grid size must be at least 2, got {grid_size}.")
    return np.arange(1, grid_size) / grid_size


def discretize_gaussian(
    model: GaussianRegressionModel, covariates: np.ndarray, grid_size: int
) -> GridDistribution:
    """
    Discretize N(xᵢβ, σ̂²) onto its quantiles at levels 1/K, …, 1 − 1/K with uniform weights.
    :param model: The fitted regression.
    :param covariates: The rows at which to evaluate the conditional distribution.
    :param grid_size: K; every row carries K − 1 atoms.
    :return: The :py:class:`GridDistribution`.
    """
    levels = quantile_levels(grid_size)
    means = model.predict(np.asarray(covariates, dtype=float))
    grid = means[:, None] + model.residual_sd * norm.ppf(levels)[None, :]
    return uniform_grid(grid)
