"""Exception types shared across the package."""


class SblError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SblError):
    """Malformed input: bad shapes, non-finite values, out-of-range hyperparameters."""


class ConditioningError(SblError):
    """A Cholesky factorization failed; carries the offending pivot index.

    Analytically the factored matrices are positive definite, so a failure
    signals numerical overflow/underflow in the inputs rather than a model
    error.
    """

    def __init__(self, message: str, pivot: int, iteration: int | None = None):
        self.pivot = pivot
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class NonOrthogonalError(InvalidInputError):
    """Design rejected by an orthogonality precondition; names the worst pair."""

    def __init__(self, message: str, pair: tuple[int, int], cosine: float):
        self.pair = pair
        self.cosine = cosine
        super().__init__(message)


class ConvergenceError(SblError):
    """An iterative solver hit its sweep/iteration cap without converging."""

    def __init__(self, message: str, lam: float | None = None, sweeps: int | None = None):
        self.lam = lam
        self.sweeps = sweeps
        super().__init__(message)
