"""Shared exception types."""


class InputError(ValueError):
    """Bad user-supplied input: files, configuration, or argument values."""


class ConvergenceError(RuntimeError):
    """An iterative fit failed to reach its stopping criteria."""
