"""Exception types raised across the package."""


class DiffTPTError(Exception):
    pass


class ZeroNorm(DiffTPTError, ValueError):
    pass


class NonPositiveTemperature(DiffTPTError, ValueError):
    pass


class EmptyInput(DiffTPTError, ValueError):
    pass


class EmptySelection(DiffTPTError, ValueError):
    pass


class LengthMismatch(DiffTPTError, ValueError):
    pass


class DimensionMismatch(DiffTPTError, ValueError):
    pass


class NonFiniteGradient(DiffTPTError, FloatingPointError):
    pass


class SeparationFailure(DiffTPTError, RuntimeError):
    pass


class InvalidAxisValue(DiffTPTError, ValueError):
    pass


class ConfigError(DiffTPTError, ValueError):
    """Bad run configuration (unknown key, bad value, missing file)."""


class UnknownKey(ConfigError):
    pass


class MissingFile(ConfigError):
    pass
