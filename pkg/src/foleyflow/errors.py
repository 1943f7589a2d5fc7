"""Exception types shared across the package."""


class FoleyError(Exception):
    """Base class for all package errors."""


class DimensionError(FoleyError, ValueError):
    pass


class UnsupportedDownsampleError(DimensionError):
    pass


class RangeError(FoleyError, ValueError):
    pass


class LengthError(FoleyError, ValueError):
    pass


class NumericError(FoleyError, ArithmeticError):
    pass


class SamplerDivergenceError(NumericError):
    pass


class ScheduleError(FoleyError, ValueError):
    pass


class DegenerateBatchError(FoleyError, ValueError):
    pass


class CheckpointError(FoleyError):
    pass


class ConfigError(FoleyError, ValueError):
    pass
