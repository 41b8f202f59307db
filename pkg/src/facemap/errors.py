"""Exception taxonomy shared by all facemap modules.

Three families map onto CLI exit codes: configuration problems (exit 2),
data problems (exit 3) and numerical failures (exit 4).
"""


class FacemapError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FacemapError):
    """Invalid configuration: bad arch file, bad pipeline config, bad flags."""

    exit_code = 2


class DataError(FacemapError):
    """Invalid or missing input data."""

    exit_code = 3


class NumericalError(FacemapError):
    """A numerical computation failed or is undefined for the given input."""

    exit_code = 4


# --- tensor container ---

class TensorFormatError(DataError):
    """Malformed tensor container file."""


class BadMagic(TensorFormatError):
    pass


class DimOverflow(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class BadTensorShape(DataError):
    """Tensor has the wrong rank/shape for the requested operation."""


# --- scans and manifests ---

class ParseError(DataError):
    """Malformed text input; carries the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RejectedScan(DataError):
    """Scan fails validation (too few points, inconsistent attributes)."""


class NoNoseTip(DataError):
    """No nose tip provided and the heuristic found no candidate."""


class EmptyProjection(DataError):
    """Raster projection produced an all-zero coverage mask."""


class MissingFeature(DataError):
    """A required per-scan feature file is absent."""


class InsufficientSubjects(DataError):
    """Manifest has fewer eligible subjects than the fold plan needs."""


class DimMismatch(DataError):
    """Operands have incompatible dimensions."""


class SingleClass(DataError):
    """Training set contains only one class label."""


# --- network engine ---

class UnknownLayerKind(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    """Weight tensor shape disagrees with the architecture; names the layer."""


class ZeroFeature(NumericalError):
    """Tap activation is identically zero; unit normalization is undefined."""


# --- linear algebra ---

class RankDeficient(NumericalError):
    """Least-squares system is numerically rank deficient."""
