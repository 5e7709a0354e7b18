"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data errors -> 2,
numeric failures -> 3.
"""


class PtqLoraError(Exception):
    exit_code = 1


class ShapeError(PtqLoraError, ValueError):
    pass


class ConfigError(PtqLoraError, ValueError):
    exit_code = 1


class DataError(PtqLoraError, ValueError):
    exit_code = 2


class SchemaError(DataError):
    pass


class NumericError(PtqLoraError, ArithmeticError):
    exit_code = 3


class UndefinedLossError(NumericError):
    pass


class SingularHessianError(NumericError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ReportError(DataError):
    pass
