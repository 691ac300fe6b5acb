"""Error taxonomy shared across the package.

Grouped by how the command-line layer maps them to exit codes:
input/format problems (2), configuration and shape problems (3), and
failed runtime verification (4).
"""


class FormatError(ValueError):
    """Malformed external input: detection streams, tensor files, containers.

    Carries an optional 1-based line number for line-oriented inputs.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


class ShapeError(ValueError):
    """Operands with incompatible extents or precisions."""


class ParamError(ValueError):
    """Out-of-range scalar argument (stride, kernel extent, repetition count)."""


class BoundsError(ValueError):
    """Region lies outside the tensor it is applied to."""


class VerificationError(Exception):
    """A runtime self-check (count/verify/consistency pass) failed."""
