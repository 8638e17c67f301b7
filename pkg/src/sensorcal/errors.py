"""Exception hierarchy. Each class carries the machine-readable code the CLI prints."""


class CalibrationError(Exception):
    code = "error"
    exit_code = 1


class DimensionError(CalibrationError, ValueError):
    code = "dimension_error"
    exit_code = 2


class NumericError(CalibrationError, FloatingPointError):
    code = "numeric_error"
    exit_code = 4


class WindowTooSmallError(CalibrationError, ValueError):
    code = "window_too_small"
    exit_code = 2


class DataError(CalibrationError, ValueError):
    code = "data_error"
    exit_code = 3


class DivergenceError(NumericError):
    code = "divergence"
    exit_code = 4

    def __init__(self, message, epoch=None, batch_index=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class EmptyTestSetError(DataError):
    code = "empty_test_set"
