"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class GMNError(Exception):
    exit_code = 1


class ConfigError(GMNError, ValueError):
    exit_code = 2


class DataError(GMNError, ValueError):
    exit_code = 3


class IngestionError(DataError):
    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class SplitError(DataError):
    pass


class SamplingError(DataError):
    pass


class MiningError(SamplingError):
    pass


class CheckpointError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericError(GMNError, ArithmeticError):
    exit_code = 4


class ShapeError(GMNError, ValueError):
    exit_code = 4


class StateError(GMNError, RuntimeError):
    exit_code = 4


class ReportIOError(GMNError, OSError):
    exit_code = 5
