"""Exception types shared across the package."""


class VarclustError(Exception):
    """Base class for all package-specific errors."""


class InvalidArgumentError(VarclustError, ValueError):
    """Structurally invalid input: wrong shape, length, range, or option."""


class NumericDomainError(VarclustError, ArithmeticError):
    """Input or intermediate value left the numeric domain an operation needs."""


class FormatError(VarclustError):
    """A file does not conform to its declared binary or text format."""


class ConsistencyError(VarclustError):
    """Two artifacts that must agree (counts, ids, lengths) do not."""


class IntegrityError(VarclustError):
    """A checkpoint or manifest fails verification (hash, truncation, mismatch)."""


class UsageError(VarclustError):
    """Bad command-line invocation or run configuration."""
