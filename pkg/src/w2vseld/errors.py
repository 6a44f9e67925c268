"""Exception types shared across the package.

Each class maps to one CLI exit code (see :mod:`w2vseld.cli`).
"""


class W2vSeldError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(W2vSeldError, ValueError):
    """Invalid configuration. Carries every problem found, not just the first."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(W2vSeldError, ValueError):
    """Malformed audio, annotation or corpus input."""

    exit_code = 3


class NumericalError(W2vSeldError, FloatingPointError):
    """A non-finite value appeared in a loss, activation or gradient."""

    exit_code = 4

    def __init__(self, message, term=None):
        self.term = term
        super().__init__(message)
