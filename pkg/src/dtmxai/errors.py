"""Exception hierarchy shared by all modules.

Each exception carries an ``exit_code`` used by the command-line interface:
1 for usage/configuration problems, 2 for data problems, 3 for numeric failures.
"""


class DTMError(Exception):
    exit_code = 1


class ConfigurationError(DTMError):
    exit_code = 1


class ShapeError(DTMError):
    exit_code = 1


class StateError(DTMError):
    exit_code = 1


class UnsupportedVariantError(DTMError):
    exit_code = 1


class ModalityError(DTMError):
    exit_code = 2


class DataError(DTMError):
    exit_code = 2


class DegenerateDataError(DataError):
    pass


class StratificationError(DataError):
    pass


class EncodingError(DataError):
    pass


class ParseError(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DTMError):
    exit_code = 3


class UndefinedMetricError(NumericError):
    pass


class InstabilityError(NumericError):
    pass
