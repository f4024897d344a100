"""Exception types shared across the package.

The CLI maps each class to a process exit code.
"""


class ValidationError(ValueError):
    """Bad input: a precondition on shapes, ranges or config was violated."""

    exit_code = 2


class DivergenceError(FloatingPointError):
    """A numerical iteration produced non-finite values."""

    exit_code = 3


class NonConvergenceError(RuntimeError):
    """An iteration hit its step budget before meeting its tolerance."""

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
