"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries the code it
should produce.
"""


class MFTError(Exception):
    exit_code = 1


class ConfigError(MFTError, ValueError):
    """Invalid configuration, flags or parameters."""

    exit_code = 2


class ContractError(MFTError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class ShapeError(MFTError, ValueError):
    exit_code = 2


class DataError(MFTError, ValueError):
    """Input data violates an invariant (bbox order, frame order, codes...)."""

    exit_code = 3


class SchemaError(DataError):
    exit_code = 3


class ParseError(DataError):
    exit_code = 3


class NumericError(MFTError, ArithmeticError):
    """An operation produced NaN/Inf or left its numeric domain."""

    exit_code = 4
