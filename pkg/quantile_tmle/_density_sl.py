"""
Conditional density super learner: hazard-factorized histogram candidates with bins placed by
cutting the ECDF graph with a family of parallel lines, stacked by minimizing a cross-validated
negative log-likelihood over the simplex.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple, Protocol

import numpy as np
from sklearn.base import ClassifierMixin, clone
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from ._core import uniform_grid
from ._nuisance import quantile_levels
from .exceptions import DensityEstimationException
from .models import BinScheme, Dataset, GridDistribution, StackedDensity

logger = logging.getLogger("quantile_tmle")

DENSITY_FLOOR = 1e-12
_HAZARD_CLIP = 1e-12


class FittedDensity(Protocol):
    breakpoints: np.ndarray

    def density(self, covariates: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def cdf(self, covariates: np.ndarray, points: np.ndarray) -> np.ndarray: ...


class DensityCandidate(Protocol):
    def fit(self, covariates: np.ndarray, y: np.ndarray) -> FittedDensity: ...


class RepeatedMeasures(NamedTuple):
    """
    The person-period table of a hazard fit. Row r belongs to unit `unit[r]` at bin
    `bin_index[r]`, with `label[r] = 1` on the bin that holds the unit's outcome.
    """

    covariates: np.ndarray
    bin_index: np.ndarray
    label: np.ndarray
    unit: np.ndarray


def denby_mallows_boundaries(y_observed: np.ndarray, c: float, k: int) -> BinScheme:
    """
    Place histogram bins by cutting the ECDF graph with the lines u = b·h, b = 0, …, k, where
    u(x, F) = (x − lo) + c·R·F runs along the graph from (lo, 0) to (hi, 1). [lo, hi] is the
    data range padded by half the median gap between distinct values and R = hi − lo.

    `c = 0` gives equal-width bins, a large `c` puts the cuts at empirical quantiles. Cuts that
    coincide are merged, so the scheme may carry fewer than `k` bins.

    Adding an outcome beyond the current maximum moves the last boundary outward. Unless the median
    gap changes, the first boundary stays put. The interior cuts are not fixed, since R and the ECDF
    both change: with `c = 0` they must move to keep the bins equal in width.
    :param y_observed: The observed outcomes.
    :param c: The nonnegative slope parameter.
    :param k: The requested number of bins.
    :return: The :py:class:`BinScheme`.
    """
    if k < 1:
        raise DensityEstimationException(f"At least one bin is required, got k={k}.")
    if c < 0:
        raise DensityEstimationException(f"The slope parameter must be nonnegative, got {c}.")
    y = np.sort(np.asarray(y_observed, dtype=float).ravel())
    if y.size == 0 or not np.isfinite(y).all():
        raise DensityEstimationException("Bin placement needs finite observed outcomes.")
    values, counts = np.unique(y, return_counts=True)
    if values.size < k:
        raise DensityEstimationException(
            f"{k} bins need at least {k} distinct outcomes, got {values.size}."
        )
    gap = float(np.median(np.diff(values))) if values.size > 1 else 1.0
    lo, hi = values[0] - gap / 2.0, values[-1] + gap / 2.0
    span = hi - lo

    ecdf = np.cumsum(counts) / y.size
    before = np.concatenate(([0.0], ecdf[:-1]))
    xs = np.concatenate(([lo], np.repeat(values, 2), [hi]))
    fs = np.concatenate(([0.0], np.column_stack([before, ecdf]).ravel(), [1.0]))
    u = (xs - lo) + c * span * fs
    cuts = np.interp(np.arange(k + 1) * (u[-1] / k), u, xs)
    cuts[0], cuts[-1] = lo, hi
    boundaries = np.unique(cuts)
    if boundaries.size - 1 < k:
        logger.debug(f"Merged coinciding cuts: {k} requested bins, {boundaries.size - 1} kept.")
    return BinScheme(boundaries=boundaries, c=c, k=boundaries.size - 1)


def _as_matrix(covariates: np.ndarray) -> np.ndarray:
    covariates = np.asarray(covariates, dtype=float)
    return covariates.reshape(-1, 1) if covariates.ndim == 1 else covariates


def _bin_of(scheme: BinScheme, y: np.ndarray) -> np.ndarray:
    index = np.searchsorted(scheme.boundaries, y, side="right") - 1
    return np.where(y == scheme.boundaries[-1], scheme.k - 1, index)


def _expand(covariates: np.ndarray, y: np.ndarray, scheme: BinScheme) -> RepeatedMeasures:
    y = np.asarray(y, dtype=float).ravel()
    outside = (y < scheme.boundaries[0]) | (y > scheme.boundaries[-1])
    if outside.any():
        raise DensityEstimationException(
            f"Outcome {y[outside][0]} lies outside the bins "
            f"[{scheme.boundaries[0]}, {scheme.boundaries[-1]}]."
        )
    bins = _bin_of(scheme, y)
    unit = np.repeat(np.arange(y.size), bins + 1)
    bin_index = np.concatenate([np.arange(t + 1) for t in bins]).astype(int)
    label = (bin_index == bins[unit]).astype(int)
    return RepeatedMeasures(
        covariates=np.asarray(covariates, dtype=float)[unit],
        bin_index=bin_index,
        label=label,
        unit=unit,
    )


def expand_repeated_measures(data: Dataset, scheme: BinScheme) -> RepeatedMeasures:
    """
    Repeat every observed unit once per bin it survives into: a unit whose outcome falls in bin t
    (0-based) contributes rows j = 0, …, t labelled 1{j = t}. A Bernoulli likelihood on these rows
    is the hazard-factorized likelihood of the bin probabilities.
    :param data: The dataset; only rows flagged by :py:attr:`Dataset.observed` are expanded.
    :param scheme: The bins.
    :return: The :py:class:`RepeatedMeasures` table.
    """
    mask = data.observed
    return _expand(data.covariates[mask], data.outcome[mask], scheme)


def _default_classifier() -> ClassifierMixin:
    return make_pipeline(StandardScaler(), LogisticRegression(C=1e4, max_iter=1000))


class FittedHazardDensity:
    """
    A histogram density whose bin probabilities are built from per-bin hazards,
    Pr(bin t | x) = λ_t(x)·∏_{j<t}(1 − λ_j(x)), with the hazard of the last bin fixed at one.
    """

    def __init__(
        self,
        scheme: BinScheme,
        classifier: ClassifierMixin | None,
        constant_hazards: np.ndarray | None = None,
    ):
        self.scheme = scheme
        self._classifier = classifier
        self._constant_hazards = constant_hazards

    @property
    def breakpoints(self) -> np.ndarray:
        return self.scheme.boundaries

    def _features(self, covariates: np.ndarray, bin_index: np.ndarray) -> np.ndarray:
        one_hot = np.eye(self.scheme.k - 1)[bin_index]
        return np.column_stack([covariates, one_hot])

    def hazards(self, covariates: np.ndarray) -> np.ndarray:
        """
        The n × k matrix of conditional hazards. The last column is one.
        """
        covariates = _as_matrix(covariates)
        n, k = covariates.shape[0], self.scheme.k
        hazards = np.ones((n, k))
        if k == 1:
            return hazards
        if self._classifier is None:
            hazards[:, :-1] = self._constant_hazards[None, :]
            return hazards
        bin_index = np.tile(np.arange(k - 1), n)
        features = self._features(np.repeat(covariates, k - 1, axis=0), bin_index)
        positive = list(self._classifier.classes_).index(1)
        predicted = self._classifier.predict_proba(features)[:, positive]
        hazards[:, :-1] = np.clip(predicted.reshape(n, k - 1), _HAZARD_CLIP, 1 - _HAZARD_CLIP)
        return hazards

    def bin_probabilities(self, covariates: np.ndarray) -> np.ndarray:
        hazards = self.hazards(covariates)
        survival = np.cumprod(
            np.column_stack([np.ones(hazards.shape[0]), 1.0 - hazards[:, :-1]]), axis=1
        )
        return survival * hazards

    def density(self, covariates: np.ndarray, y: np.ndarray) -> np.ndarray:
        """
        Evaluate ĝ(yᵢ | xᵢ) = Pr(bin of yᵢ | xᵢ)/width, and 0 outside the bins.
        :param covariates: The n × p covariate matrix.
        :param y: The n outcomes, one per row.
        :return: The density values.
        """
        y = np.asarray(y, dtype=float).ravel()
        probabilities = self.bin_probabilities(covariates)
        bins = np.clip(_bin_of(self.scheme, y), 0, self.scheme.k - 1)
        inside = (y >= self.scheme.boundaries[0]) & (y <= self.scheme.boundaries[-1])
        values = probabilities[np.arange(y.size), bins] / self.scheme.widths[bins]
        return np.where(inside, values, 0.0)

    def cdf(self, covariates: np.ndarray, points: np.ndarray) -> np.ndarray:
        """
        Evaluate the piecewise-linear conditional CDF of every row at shared points.
        :param covariates: The n × p covariate matrix.
        :param points: The m evaluation points.
        :return: The n × m matrix of CDF values.
        """
        points = np.asarray(points, dtype=float).ravel()
        probabilities = self.bin_probabilities(covariates)
        below = np.column_stack(
            [np.zeros(probabilities.shape[0]), np.cumsum(probabilities, axis=1)[:, :-1]]
        )
        bins = np.clip(_bin_of(self.scheme, points), 0, self.scheme.k - 1)
        fraction = np.clip(
            (points - self.scheme.boundaries[bins]) / self.scheme.widths[bins], 0.0, 1.0
        )
        values = below[:, bins] + probabilities[:, bins] * fraction[None, :]
        values[:, points < self.scheme.boundaries[0]] = 0.0
        values[:, points >= self.scheme.boundaries[-1]] = 1.0
        return values


class HazardDensityCandidate:
    """
    A library entry: bins from :py:func:`denby_mallows_boundaries` with slope `c` and `k` bins,
    and a classifier for the per-bin hazards trained on the repeated-measures table with the
    covariates and a one-hot bin index as features.
    """

    def __init__(self, c: float, k: int, classifier: ClassifierMixin | None = None):
        self.c = c
        self.k = k
        self.classifier = classifier if classifier is not None else _default_classifier()

    @property
    def name(self) -> str:
        return f"hazard(c={self.c:g}, k={self.k})"

    def fit(self, covariates: np.ndarray, y: np.ndarray) -> FittedHazardDensity:
        covariates = _as_matrix(covariates)
        scheme = denby_mallows_boundaries(y, self.c, self.k)
        if scheme.k == 1:
            return FittedHazardDensity(scheme, None)
        table = _expand(covariates, y, scheme)
        trainable = table.bin_index < scheme.k - 1
        labels = table.label[trainable]
        if labels.min() == labels.max():
            counts = np.bincount(table.bin_index[trainable], minlength=scheme.k - 1)
            events = np.bincount(
                table.bin_index[trainable], weights=labels, minlength=scheme.k - 1
            )
            constant = np.clip(events / np.maximum(counts, 1), _HAZARD_CLIP, 1 - _HAZARD_CLIP)
            return FittedHazardDensity(scheme, None, constant_hazards=constant)
        fitted = FittedHazardDensity(scheme, clone(self.classifier))
        features = fitted._features(table.covariates[trainable], table.bin_index[trainable])
        fitted._classifier.fit(features, labels)
        return fitted


def default_library(
    c_values: tuple[float, ...] = (0.0, 1.0, 1e6),
    k_values: tuple[int, ...] = (5, 10, 20),
    classifier: ClassifierMixin | None = None,
) -> list[HazardDensityCandidate]:
    """
    The Cartesian product of bin slopes and bin counts, one :py:class:`HazardDensityCandidate`
    per pair.
    """
    return [HazardDensityCandidate(c, k, classifier) for c in c_values for k in k_values]


def _observed_rows(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mask = data.observed
    return data.covariates[mask], data.outcome[mask]


def _folds(n: int, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if folds < 2:
        raise DensityEstimationException(f"Cross-validation needs at least 2 folds, got {folds}.")
    if n < folds:
        raise DensityEstimationException(
            f"{folds} folds over {n} observed units would leave a fold empty."
        )
    return list(KFold(n_splits=folds, shuffle=True, random_state=seed).split(np.arange(n)))


def _risk(densities: np.ndarray, unit_weights: np.ndarray) -> float:
    return float(-np.sum(unit_weights * np.log(np.maximum(densities, DENSITY_FLOOR))))


def _validation_matrix(
    candidates: list[DensityCandidate],
    covariates: np.ndarray,
    y: np.ndarray,
    splits: list[tuple[np.ndarray, np.ndarray]],
    workers: int,
) -> np.ndarray:
    cells = [(c, f) for c in range(len(candidates)) for f in range(len(splits))]

    def _evaluate(cell: tuple[int, int]) -> np.ndarray:
        candidate, fold = cell
        train, valid = splits[fold]
        fitted = candidates[candidate].fit(covariates[train], y[train])
        return fitted.density(covariates[valid], y[valid])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_evaluate, cells))
    else:
        results = [_evaluate(cell) for cell in cells]
    matrix = np.empty((y.size, len(candidates)))
    for (candidate, fold), values in zip(cells, results):
        matrix[splits[fold][1], candidate] = values
    return matrix


def _fold_unit_weights(n: int, splits: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    weights = np.empty(n)
    for _, valid in splits:
        weights[valid] = 1.0 / (len(splits) * valid.size)
    return weights


def cv_risk(candidate: DensityCandidate, data: Dataset, folds: int = 5, seed: int = 0) -> float:
    """
    The cross-validated negative log-likelihood
    −(1/J) Σⱼ mean_{i ∈ Vⱼ} log ĝ₋ⱼ(Yᵢ | Xᵢ), where ĝ₋ⱼ is fitted without fold j. Densities are
    floored at 1e-12 before the log.
    :param candidate: Anything with `fit(covariates, y)` returning a fitted density.
    :param data: The dataset; only observed rows enter.
    :param folds: J, at least 2.
    :param seed: The fold shuffling seed.
    :return: The risk.
    """
    covariates, y = _observed_rows(data)
    splits = _folds(y.size, folds, seed)
    matrix = _validation_matrix([candidate], covariates, y, splits, workers=1)
    return _risk(matrix[:, 0], _fold_unit_weights(y.size, splits))


def _exponentiated_gradient(
    matrix: np.ndarray, unit_weights: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, float, bool]:
    alpha = np.full(matrix.shape[1], 1.0 / matrix.shape[1])
    risk = _risk(matrix @ alpha, unit_weights)
    step = 1.0
    for _ in range(max_iter):
        mixture = np.maximum(matrix @ alpha, DENSITY_FLOOR)
        gradient = -(unit_weights / mixture) @ matrix
        while True:
            proposal = alpha * np.exp(-step * (gradient - gradient.min()))
            proposal /= proposal.sum()
            proposal_risk = _risk(matrix @ proposal, unit_weights)
            if proposal_risk <= risk or step < 1e-12:
                break
            step /= 2.0
        improvement = risk - proposal_risk
        if proposal_risk <= risk:
            alpha, risk = proposal, proposal_risk
        if improvement < tol:
            return alpha, risk, True
        step *= 2.0
    return alpha, risk, False


def stack_weights(
    candidates: list[DensityCandidate],
    data: Dataset,
    folds: int = 5,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-10,
    workers: int = 1,
) -> StackedDensity:
    """
    Choose simplex weights α minimizing the cross-validated negative log-likelihood of the mixture
    Σₖ αₖ ĝₖ, then refit every candidate on all observed rows.

    Weights start uniform and move by exponentiated gradient with backtracking until an iteration
    improves the risk by less than `tol`. If the cap is hit the best iterate is kept and
    `converged` is False. The result is never worse than the best single candidate.
    :param candidates: The library, at least one entry.
    :param data: The dataset; only observed rows enter.
    :param folds: J, at least 2.
    :param seed: The fold shuffling seed.
    :param max_iter: The iteration cap of the weight optimizer.
    :param tol: The risk improvement below which the optimizer stops.
    :param workers: Threads fitting (candidate, fold) cells concurrently.
    :return: The :py:class:`StackedDensity`.
    """
    if not candidates:
        raise DensityEstimationException("The library needs at least one candidate.")
    covariates, y = _observed_rows(data)
    splits = _folds(y.size, folds, seed)
    matrix = _validation_matrix(candidates, covariates, y, splits, workers)
    unit_weights = _fold_unit_weights(y.size, splits)

    single = np.array([_risk(matrix[:, j], unit_weights) for j in range(len(candidates))])
    alpha, risk, converged = _exponentiated_gradient(matrix, unit_weights, max_iter, tol)
    if not converged:
        logger.warning(f"Stacking weights stopped at the {max_iter} iteration cap.")
    best = int(np.argmin(single))
    if single[best] < risk:
        alpha, risk = np.eye(len(candidates))[best], float(single[best])
    logger.info(
        f"Stacked {len(candidates)} density candidates with {folds} folds, "
        f"cv risk {risk:.6f} (best single {single[best]:.6f})."
    )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            refitted = list(executor.map(lambda c: c.fit(covariates, y), candidates))
    else:
        refitted = [c.fit(covariates, y) for c in candidates]
    return StackedDensity(
        candidates=refitted,
        alpha=alpha,
        cv_risk=risk,
        candidate_risks=single,
        converged=converged,
    )


def to_grid(stacked: StackedDensity, covariates: np.ndarray, grid_size: int) -> GridDistribution:
    """
    Discretize the stacked conditional distribution onto its quantiles at levels 1/K, …, 1 − 1/K.
    The mixture CDF is evaluated at the union of all bin boundaries, where it is exact for
    piecewise-linear candidates, and inverted by linear interpolation.
    :param stacked: The stacked density.
    :param covariates: The rows to discretize.
    :param grid_size: K; every row carries K − 1 atoms.
    :return: The :py:class:`GridDistribution` with uniform weights.
    """
    levels = quantile_levels(grid_size)
    covariates = _as_matrix(covariates)
    points = stacked.breakpoints
    cdf = np.maximum.accumulate(np.clip(stacked.cdf(covariates, points), 0.0, 1.0), axis=1)
    grid = np.vstack([np.interp(levels, row, points) for row in cdf])
    return uniform_grid(np.maximum.accumulate(grid, axis=1))
