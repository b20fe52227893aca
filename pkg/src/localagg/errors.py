"""Exception types raised across the package."""


class LocalAggError(Exception):
    """Base class for all package errors."""


class ZeroNormError(LocalAggError, ValueError):
    """A vector too close to zero to project onto the unit sphere."""


class DimensionMismatchError(LocalAggError, ValueError):
    pass


class IndexOutOfRangeError(LocalAggError, IndexError):
    pass


class EmptyIntersectionError(LocalAggError, ValueError):
    """Close and background neighbor sets do not overlap."""


class FormatError(LocalAggError):
    """A binary file has bad magic, an unknown version, or is truncated."""


class ConfigError(LocalAggError, ValueError):
    pass


class MissingLabelsError(LocalAggError):
    pass


class LabelMismatchError(LocalAggError, ValueError):
    pass


class BandOutOfRangeError(LocalAggError, ValueError):
    pass
