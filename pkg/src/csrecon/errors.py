"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit 2,
data/shape problems exit 3, numerical divergence exits 4.
"""


class CSReconError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(CSReconError, ValueError):
    """An argument is outside its supported range."""


class ShapeError(CSReconError, ValueError):
    """Array extents are incompatible with the operation."""


class FormatError(CSReconError):
    """A container file is corrupt, truncated or has a bad header."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class VersionError(FormatError):
    """A container file was written by an unsupported format version."""


class DegenerateMaskError(CSReconError, ValueError):
    """A sampling mask has no sampled positions."""


class DegenerateInputError(CSReconError, ValueError):
    """Metric or statistic input without the variation it needs."""


class DivergenceError(CSReconError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ConfigError(CSReconError):
    """Invalid or incomplete run configuration."""
