"""Exception types shared across the package."""


class CycleRegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CycleRegError, ValueError):
    """Operands have incompatible grid shapes, channel counts, or class counts."""


class ConfigError(CycleRegError, ValueError):
    """Invalid or inconsistent configuration (bad value, unknown key, ...)."""


class FormatError(CycleRegError, ValueError):
    """On-disk volume header or payload is malformed."""


class NumericsError(CycleRegError, ArithmeticError):
    """A numerical quantity became non-finite during evaluation."""


class PyramidTooCoarse(CycleRegError, ValueError):
    """A resolution level is too small to be downsampled further."""
