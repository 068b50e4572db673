"""Exception types; the CLI maps each family to an exit code."""


class ConfigError(ValueError):
    exit_code = 2


class DataFormatError(ValueError):
    exit_code = 3


class NumericalError(RuntimeError):
    exit_code = 4


class SearchError(RuntimeError):
    exit_code = 4
