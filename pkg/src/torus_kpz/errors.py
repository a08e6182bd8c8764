"""Exception hierarchy.

Config problems and numerical failures are kept apart so the CLI can map
them onto distinct exit codes.
"""


class TorusKpzError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(TorusKpzError, ValueError):
    pass


class GridMismatch(ConfigError):
    pass


class Unsupported(ConfigError):
    pass


class NumericalError(TorusKpzError, ArithmeticError):
    pass


class NonpositiveMass(NumericalError):
    pass


class NegativeValue(NumericalError):
    pass


class BlowUp(NumericalError):
    pass


class PositivityBreach(NumericalError):
    pass


class InsufficientSamples(TorusKpzError, ValueError):
    pass


class CostGuard(ConfigError):
    pass
