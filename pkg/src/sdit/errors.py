"""Exception types raised across the package."""


class SditError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SditError, ValueError):
    pass


class SplitSizeMismatch(ShapeMismatch):
    pass


class NonFinite(SditError, FloatingPointError):
    pass


class NotScalar(SditError, ValueError):
    pass


class DisconnectedGraph(SditError, RuntimeError):
    pass


class StateShapeMismatch(ShapeMismatch):
    pass


class StaleState(SditError, RuntimeError):
    pass


class OutOfRange(SditError, ValueError):
    pass


class BadRange(SditError, ValueError):
    pass


class BadParam(SditError, ValueError):
    pass


# file formats


class BadMagic(SditError, ValueError):
    pass


class TruncatedFile(SditError, ValueError):
    pass


class DimMismatch(SditError, ValueError):
    pass


class VersionMismatch(SditError, ValueError):
    pass


class ConfigMismatch(SditError, ValueError):
    pass


class ChecksumMismatch(SditError, ValueError):
    pass


class IoError(SditError, OSError):
    pass
