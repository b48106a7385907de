"""Exception hierarchy shared by all lfdepth modules.

The CLI maps these onto stable exit codes: usage/config problems exit 1,
IO/format problems exit 2, numerical-check failures exit 3.
"""


class LfdepthError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LfdepthError):
    """Tensor extents are incompatible with the requested operation."""


class DomainError(LfdepthError):
    """Numerically undefined input (division by exact zero, sqrt of a negative)."""


class UsageError(LfdepthError):
    """An API or CLI call violates its contract (bad mode, unknown name, ...)."""


class ConfigError(LfdepthError):
    """A configuration value or document is invalid."""


class FormatError(LfdepthError):
    """An on-disk file is malformed or truncated."""


class EvaluationError(LfdepthError):
    """A metric cannot be computed (e.g. no valid ground-truth pixels)."""


class NumericalCheckError(LfdepthError):
    """A gradient or numerical self-check failed."""
