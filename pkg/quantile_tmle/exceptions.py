class QuantileTmleException(Exception):
    """
    Base class for all quantile-tmle Exceptions.
    """

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class InvalidDatasetException(QuantileTmleException):
    """
    Exception raised when a dataset violates its contract, e.g. a required column is missing, a
    cell is not numeric or an observed unit has no outcome.
    """

    def __init__(self, message: str = "Invalid dataset."):
        self.message = message
        super().__init__(self.message)


class InvalidGridException(QuantileTmleException):
    """
    Exception raised when a quantile grid or its weights are malformed.
    """

    def __init__(self, message: str = "Invalid quantile grid."):
        self.message = message
        super().__init__(self.message)


class SingularDesignException(QuantileTmleException):
    """
    Exception raised when a design matrix is rank deficient or a weighted Gram matrix cannot be
    inverted.
    """

    def __init__(self, message: str = "Singular design matrix."):
        self.message = message
        super().__init__(self.message)


class DensityEstimationException(QuantileTmleException):
    """
    Exception raised when a bin scheme cannot be built or cross-validation folds are unusable.
    """

    def __init__(self, message: str = "Density estimation failed."):
        self.message = message
        super().__init__(self.message)


class EstimationException(QuantileTmleException):
    """
    Exception raised when an estimator cannot be computed. `estimator` names the failing
    estimator, so callers running several of them can attribute the failure.
    """

    def __init__(self, message: str = "Estimation failed.", estimator: str | None = None):
        self.estimator = estimator
        self.message = f"[{estimator}] {message}" if estimator else message
        super().__init__(self.message)


class TmleOptimizationError(EstimationException):
    """
    Exception raised when the one-dimensional fluctuation fit does not produce a finite ε.
    """

    def __init__(self, iteration: int, message: str = "Fluctuation fit failed."):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})", estimator="tmle")


class InferenceException(QuantileTmleException):
    """
    Exception raised when an influence function or Wald statistic cannot be formed.
    """

    def __init__(self, message: str = "Inference failed."):
        self.message = message
        super().__init__(self.message)
