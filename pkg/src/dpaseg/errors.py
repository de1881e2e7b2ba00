"""Exception hierarchy. Each class maps to a CLI exit code."""


class DpasegError(Exception):
    exit_code = 1


class ConfigurationError(DpasegError, ValueError):
    exit_code = 2


class DataError(DpasegError, ValueError):
    exit_code = 3


class FormatError(DataError):
    pass


class EvaluationError(DataError):
    pass


class TrainingError(DpasegError, RuntimeError):
    exit_code = 2


class NumericError(DpasegError, ArithmeticError):
    exit_code = 4
