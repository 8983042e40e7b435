"""Exception hierarchy shared by all arlmm modules.

The CLI maps these onto process exit codes, so every public failure mode
raises one of them rather than a bare ``ValueError``/``LinAlgError``.
"""


class ArlmmError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class UsageError(ArlmmError, ValueError):
    """Invalid arguments: bad shapes, out-of-range parameters, guard violations."""

    exit_code = 1


class DataError(ArlmmError, ValueError):
    """Input data is inconsistent (dimension mismatch, rank deficiency, bad files)."""

    exit_code = 2


class NumericalError(ArlmmError, ArithmeticError):
    """A linear-algebra step failed or produced an unusable result."""

    exit_code = 3


class FactorizationError(NumericalError):
    """Cholesky/LU factorization of a matrix that should be definite failed."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class DegenerateParameterizationError(NumericalError):
    """Variance components are not identifiable under the chosen parameterization."""
