"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PatchGraphError(Exception):
    exit_code = 2


class UsageError(PatchGraphError):
    exit_code = 1


class ConfigError(PatchGraphError):
    exit_code = 1


class DataError(PatchGraphError):
    exit_code = 2


class FormatError(DataError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class ShapeError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class SpecError(DataError):
    pass


class EmptyGraphError(DataError):
    pass


class NumericalError(PatchGraphError):
    exit_code = 3


class TrainingError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    pass
