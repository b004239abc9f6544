"""
Quantile-grid distributions and the step-function CDF machinery shared by every estimator.
"""

import logging

import numpy as np

from .exceptions import InvalidGridException
from .models import PROPENSITY_FLOOR, EstimandKind, GridDistribution, MarginalCdf

logger = logging.getLogger("quantile_tmle")

_INVERSION_SLACK = 1e-12


def make_uniform_grid(grid: np.ndarray) -> GridDistribution:
    """
    Put uniform weights on a matrix of conditional quantiles, one row per unit.
    :param grid: The n × K quantile matrix. Every row must be nondecreasing and K ≥ 2.
    :return: A :py:class:`GridDistribution` with all weights equal to 1/K.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2 or grid.shape[1] < 2:
        raise InvalidGridException(
            f"A quantile grid needs at least 2 columns, got shape {grid.shape}."
        )
    return uniform_grid(grid)


def uniform_grid(grid: np.ndarray) -> GridDistribution:
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    weights = np.full(grid.shape, 1.0 / grid.shape[1])
    return GridDistribution(grid=grid, weights=weights)


def clamp_propensity(propensity: np.ndarray, estimand: EstimandKind = "missing") -> np.ndarray:
    """
    Clamp propensities to [1e-10, 1] for missing outcomes or [1e-10, 1 − 1e-10] for the effect on
    the treated, where ê/(1 − ê) must stay finite.
    """
    upper = 1.0 if estimand == "missing" else 1.0 - PROPENSITY_FLOOR
    return np.clip(np.asarray(propensity, dtype=float), PROPENSITY_FLOOR, upper)


def normalize_unit_weights(unit_weights: np.ndarray | None, n: int) -> np.ndarray:
    if unit_weights is None:
        return np.full(n, 1.0 / n)
    omega = np.asarray(unit_weights, dtype=float).ravel()
    if omega.shape[0] != n:
        raise InvalidGridException(f"Expected {n} unit weights, got {omega.shape[0]}.")
    if (omega < 0).any():
        raise InvalidGridException("Unit weights must be nonnegative.")
    total = omega.sum()
    if total <= 0:
        raise InvalidGridException("Unit weights are all zero.")
    return omega / total


class AtomIndex:
    """
    The sort order of a fixed set of atom locations, computed once and reused while only the
    masses change (the targeting loop reweights a fixed grid many times).
    """

    def __init__(self, locations: np.ndarray):
        flat = np.asarray(locations, dtype=float).ravel()
        self._order = np.argsort(flat, kind="stable")
        self.locations, self._inverse = np.unique(flat[self._order], return_inverse=True)

    def cdf(self, masses: np.ndarray) -> MarginalCdf:
        merged = np.bincount(
            self._inverse,
            weights=np.asarray(masses, dtype=float).ravel()[self._order],
            minlength=self.locations.shape[0],
        )
        cumulative = np.clip(np.cumsum(merged), 0.0, 1.0)
        return MarginalCdf(locations=self.locations, masses=merged, cumulative=cumulative)

    def step_values(self, jumps: np.ndarray) -> np.ndarray:
        """
        Running sums of signed jumps at the sorted locations, i.e. the value of a right-continuous
        step function at each location.
        """
        merged = np.bincount(
            self._inverse,
            weights=np.asarray(jumps, dtype=float).ravel()[self._order],
            minlength=self.locations.shape[0],
        )
        return np.cumsum(merged)


def marginal_cdf(dist: GridDistribution, unit_weights: np.ndarray | None = None) -> MarginalCdf:
    """
    Average the per-unit conditional CDFs into a marginal CDF,
    F̂(y) = Σᵢ ωᵢ Σₖ 1{Q[i,k] ≤ y}·w[i,k].
    :param dist: The grid distribution.
    :param unit_weights: Nonnegative unit weights ωᵢ, normalized internally. None means uniform
                         (missing outcomes); pass the treatment indicator for the effect on the
                         treated.
    :return: The marginal step-function CDF.
    """
    omega = normalize_unit_weights(unit_weights, dist.n)
    return AtomIndex(dist.grid).cdf(omega[:, None] * dist.weights)


def invert_cdf(cdf: MarginalCdf, q: float) -> float:
    """
    Exact generalized inverse inf{y: F(y) ≥ q} over the atom set. A slack of 1e-12 absorbs
    rounding in the cumulative sums.
    :param cdf: The marginal CDF.
    :param q: The level, 0 < q < 1.
    :return: The smallest atom location whose CDF value reaches `q`.
    """
    if not 0 < q < 1:
        raise ValueError(f"The quantile level must lie in (0, 1), got {q}.")
    index = int(np.searchsorted(cdf.cumulative, q - _INVERSION_SLACK, side="left"))
    if index >= cdf.locations.shape[0]:
        return float(cdf.locations[-1])
    return float(cdf.locations[index])


def weighted_quantile(
    y: np.ndarray, h: np.ndarray, q: float, total: float | None = None
) -> float:
    """
    The smallest order statistic y₍ⱼ₎ whose cumulative weight reaches `q`.

    With `total=None` cumulative weights are self-normalized by Σh (Hájek), which is the
    minimizer of the weighted check loss. With a `total`, cumulative weights are divided by it
    (Horvitz-Thompson), so the equation (1/total)·Σ hᵢ 1{yᵢ ≤ θ} = q may have no solution; the
    largest observation is then returned and a warning is logged.
    :param y: The observations. Entries with zero weight may be NaN.
    :param h: Nonnegative weights.
    :param q: The level, 0 < q < 1.
    :param total: The Horvitz-Thompson normalizer, typically the sample size.
    :return: The weighted quantile.
    """
    if not 0 < q < 1:
        raise ValueError(f"The quantile level must lie in (0, 1), got {q}.")
    y = np.asarray(y, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    if (h < 0).any():
        raise ValueError("Weights must be nonnegative.")
    keep = h > 0
    if not keep.any():
        raise ValueError("All weights are zero.")
    y, h = y[keep], h[keep]
    order = np.argsort(y, kind="stable")
    y, h = y[order], h[order]
    normalizer = h.sum() if total is None else float(total)
    cumulative = np.cumsum(h) / normalizer
    index = int(np.searchsorted(cumulative, q - _INVERSION_SLACK, side="left"))
    if index >= y.shape[0]:
        logger.warning(
            f"Weighted cumulative mass {cumulative[-1]:.4f} never reaches q={q}; "
            "returning the largest observation."
        )
        return float(y[-1])
    return float(y[index])
