"""Exception types shared across the library."""


class NoiseSearchError(Exception):
    """Base class for all library-specific errors."""


class NumericalError(NoiseSearchError):
    """A numerical routine failed to produce a finite, trustworthy result."""


class NumericalDivergenceError(NumericalError):
    """An integrator produced a non-finite state.

    Attributes:
        sigma: Noise level at which the divergence was detected.
    """

    def __init__(self, message, sigma=None):
        super().__init__(message)
        self.sigma = sigma


class UndefinedSimilarityError(NumericalError):
    """Cosine similarity requested for a zero-norm feature vector."""


class BudgetExhaustedError(NoiseSearchError):
    """A search ran out of its NFE budget before completing.

    Attributes:
        audit: Partial per-iteration audit gathered before exhaustion.
    """

    def __init__(self, message, audit=None):
        super().__init__(message)
        self.audit = audit if audit is not None else []


class ConfigError(NoiseSearchError):
    """An experiment configuration is invalid.

    Attributes:
        key: The offending configuration key, when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
