"""Exception types shared across the library."""


class ShapeError(ValueError):
    """An input array has the wrong dimension or length."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or violates an invariant."""


class EmptyBatchError(ValueError):
    """An operation that needs data received an empty batch."""


class StaleDataError(RuntimeError):
    """Required trajectory data is missing or out of date."""


class ContextStarvationError(RuntimeError):
    """Rejection sampling could not produce initial states for a context.

    Raised when a context's empirical probability under the initial-state
    distribution appears to be below ~1e-4 (we give up after 100,000
    consecutive rejections rather than loop forever).
    """

    def __init__(self, context: int, attempts: int):
        self.context = context
        self.attempts = attempts
        super().__init__(
            f"context {context}: no accepted initial state in {attempts} draws"
        )


class NumericalError(ArithmeticError):
    """A numerical routine produced non-finite intermediates."""
