"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MatError(Exception):
    exit_code = 1


class ConfigError(MatError, ValueError):
    exit_code = 2


class DimensionError(MatError, ValueError):
    exit_code = 2


class ContractError(MatError, ValueError):
    exit_code = 2


class DataError(MatError):
    exit_code = 3


class NumericError(MatError, ArithmeticError):
    exit_code = 4


class VerificationError(MatError):
    exit_code = 5
