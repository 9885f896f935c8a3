"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2 (argparse),
data-shaped failures exit 3, numeric failures exit 4.
"""


class EffortStudioError(Exception):
    """Base class for all package-specific errors."""


class ParseError(EffortStudioError):
    """Malformed input file; message carries row/offset context."""


class SchemaError(EffortStudioError):
    """Structurally valid file with inconsistent content (e.g. joint counts)."""


class DegenerateExtentError(EffortStudioError):
    """Normalization asked for on data with zero spatial extent."""


class InsufficientDataError(EffortStudioError):
    """Fewer items available than a split or fit requires."""


class ConflictError(EffortStudioError):
    """A manual label already exists at the same key with a different value."""


class ConfigError(EffortStudioError):
    """Shape or configuration mismatch between data and model."""


class PreconditionError(EffortStudioError, ValueError):
    """An operation's documented precondition was violated."""


class NumericError(EffortStudioError, ArithmeticError):
    """Non-finite value produced during evaluation or optimization."""
