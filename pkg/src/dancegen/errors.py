"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes (see cli.py): validation
failures exit 2, missing dependencies 3, I/O problems 4.
"""


class DancegenError(Exception):
    """Base class for all package errors."""


class ShapeError(DancegenError, ValueError):
    """Array/frame dimension mismatch, bad length, or padding violation."""


class ContractError(DancegenError, ValueError):
    """API contract breach: non-scalar loss, non-positive step size, bad order."""


class DegenerateInputError(DancegenError, ValueError):
    """Degenerate numeric input: near-parallel rotation columns, fully masked row."""


class OutOfRangeError(DancegenError, ValueError):
    """Value outside its documented range (code index, quantizer level)."""


class RoutingError(OutOfRangeError):
    """Genre id outside the configured expert range."""


class FormatError(DancegenError, ValueError):
    """File could not be parsed or failed document-level validation."""


class ConfigError(DancegenError, ValueError):
    """Invalid, unknown, or inconsistent configuration value."""


class InputError(DancegenError, ValueError):
    """Empty or unusable input collection (dataset, directory)."""


class DependencyError(DancegenError, RuntimeError):
    """A required artifact (checkpoint, manifest) is missing."""
