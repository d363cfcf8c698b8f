"""Exception types shared across the engine.

All derive from :class:`PalmError`; apart from :class:`NumericError` they
are also ``ValueError`` subclasses. The CLI turns data, shape and archive
errors into exit code 2 and numeric failures into exit code 3.
"""


class PalmError(Exception):
    """Base class for all engine errors."""


class ShapeError(PalmError, ValueError):
    pass


class NumericError(PalmError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DataError(PalmError, ValueError):
    """Dataset trees, manifests or image files that cannot be used."""


class ConfigError(PalmError, ValueError):
    pass


class GraphError(PalmError, ValueError):
    """Malformed layer graphs: unknown nodes, cycles, double heads."""


class ArchiveError(PalmError, ValueError):
    """Weight archive could not be read or does not fit the graph."""


class BadMagicError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    """Stored CRC32 does not match the archive bytes (corrupt or truncated)."""


class SingleClassError(PalmError, ValueError):
    """ROC input has only positives or only negatives."""
