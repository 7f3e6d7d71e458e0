from typing import Optional


class NafError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigError(NafError, ValueError):
    pass


class FormatError(NafError, ValueError):
    """Malformed or version-mismatched file on disk."""


class GeometryError(NafError, ValueError):
    pass


class PhantomError(NafError, ValueError):
    pass


class ShapeMismatchError(NafError, ValueError):
    pass


class UsageError(NafError, ValueError):
    pass


class NonFiniteLossError(NafError, ArithmeticError):
    def __init__(self, message: str, ray_index: Optional[int] = None):
        super().__init__(message)
        self.ray_index = ray_index


class TrainingDivergedError(NafError, ArithmeticError):
    pass


class SartDivergedError(NafError, ArithmeticError):
    pass


# Exit code 2 for these, 1 for everything else
VALIDATION_ERRORS = (ConfigError, FormatError, GeometryError, PhantomError,
                     ShapeMismatchError, UsageError)
