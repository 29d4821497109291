"""Exception hierarchy shared by every mrd module."""


class MRDError(Exception):
    """Base class for all errors raised by mrd."""


class NearZeroNorm(MRDError, ValueError):
    pass


class InvalidConfig(MRDError, ValueError):
    pass


class ConfigError(InvalidConfig):
    pass


class InvalidBatch(MRDError, ValueError):
    pass


class BadMagic(MRDError, ValueError):
    pass


class DimMismatch(MRDError, ValueError):
    pass


class BatchMismatch(MRDError, ValueError):
    pass


class ShapeMismatch(MRDError, ValueError):
    pass


class FormMismatch(MRDError, ValueError):
    pass


class NonPositiveTau(MRDError, ValueError):
    pass


class NonFiniteLogit(MRDError, ValueError):
    pass


class EmptyCloud(MRDError, ValueError):
    pass


class KTooLarge(MRDError, ValueError):
    pass


class NonFiniteMetric(MRDError, ValueError):
    pass


class NonFiniteLoss(MRDError, ArithmeticError):
    pass


class MRDIOError(MRDError, OSError):
    """Raised when reading or writing an artifact file fails."""
