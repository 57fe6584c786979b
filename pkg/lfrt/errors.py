"""
Exception hierarchy shared by every lfrt module.

"""

class LFRTError(Exception):
    """Base class for all errors raised by lfrt."""


class ShapeError(LFRTError, ValueError):
    """Dimension, divisibility or index errors."""


class RangeError(LFRTError, ValueError):
    """A value lies outside its admissible range."""


class ConfigError(LFRTError, ValueError):
    """Malformed or unknown configuration, or bad command-line input."""


class CalibrationError(LFRTError, ValueError):
    """Degenerate calibration input or a calibration set of the wrong kind."""


class FormatError(LFRTError, IOError):
    """A file on disk does not follow the expected format."""


class NumericFault(LFRTError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
