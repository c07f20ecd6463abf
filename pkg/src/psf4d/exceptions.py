"""Error types raised across the package.

Every failure mode that callers may want to branch on gets its own class.
All of them derive from ValueError so generic handling stays easy; the CLI
maps ParameterError to exit code 2 and everything else to exit code 1.
"""

from __future__ import annotations


class PSF4DError(ValueError):
    """Base class for all package-specific errors."""


class ParameterError(PSF4DError):
    """A configuration value is outside its documented domain."""


class ShapeError(PSF4DError):
    """An array does not have the shape a call requires."""


class FormatError(PSF4DError):
    """A serialized tensor file is malformed."""


class MagicMismatchError(FormatError):
    """The file does not start with the tensor format's magic bytes."""


class VersionMismatchError(FormatError):
    """The file's format version is not one this reader understands."""


class TruncatedPayloadError(FormatError):
    """The payload holds fewer bytes than the header promises."""


class PredictorContractError(PSF4DError):
    """A noise predictor returned something other than a finite array of
    the input's shape."""


class DivergenceError(PSF4DError):
    """An iterative procedure produced a non-finite value; the message
    carries the step index where it happened."""


class NotSupportedError(PSF4DError):
    """A degenerate input makes the requested quantity undefined."""
