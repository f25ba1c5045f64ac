"""Exception types, each mapped to a CLI exit code."""


class FinePimError(Exception):
    exit_code = 1


class ConfigError(FinePimError, ValueError):
    exit_code = 1


class DataError(FinePimError, ValueError):
    exit_code = 2


class NumericError(FinePimError, ArithmeticError):
    exit_code = 3
