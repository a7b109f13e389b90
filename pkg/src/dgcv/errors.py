"""Exception hierarchy shared across the package."""


class DgcvError(Exception):
    """Base class; ``tag`` is the short machine-readable name used by the CLI."""

    tag = "error"


class InvalidArgumentError(DgcvError, ValueError):
    tag = "invalid-argument"


class UnsupportedOperationError(DgcvError):
    tag = "unsupported-operation"


class SingularSystemError(DgcvError, ArithmeticError):
    tag = "singular-system"


class ResourceLimitError(DgcvError):
    tag = "resource-limit"


class IngestionError(DgcvError):
    tag = "ingestion"


class NoSelectionError(DgcvError):
    """Every grid point was degenerate for some score kind."""

    tag = "no-selection"
