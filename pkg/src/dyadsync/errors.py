"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (see cli.py): configuration problems
exit 2, data problems exit 3, violated internal contracts exit 4.
"""


class DyadsyncError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DyadsyncError):
    """A model/training/CLI configuration is unusable."""


class ParameterError(ConfigError):
    """A function argument lies outside its documented domain."""


class DataError(DyadsyncError):
    """Input data violates a documented precondition (empty, out of range...)."""


class ParseError(DataError):
    """A keypoint or manifest file does not match the expected schema."""


class AmbiguityError(DataError):
    """Input is structurally valid but has no unique interpretation."""


class ContractError(DyadsyncError):
    """An internal API contract was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericalError(DyadsyncError):
    """A computation produced non-finite values."""
