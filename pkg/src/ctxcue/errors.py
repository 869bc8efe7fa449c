"""Exception hierarchy. The CLI maps each family to an exit code."""


class CueNetError(Exception):
    exit_code = 1


class ConfigError(CueNetError, ValueError):
    exit_code = 2


class DataError(CueNetError, ValueError):
    exit_code = 3


class LoadError(DataError):
    pass


class SchemaError(DataError):
    pass


class PreconditionError(DataError):
    pass


class NumericalError(CueNetError, ArithmeticError):
    exit_code = 4


class AttentionError(NumericalError, ValueError):
    pass


class PoolingError(NumericalError, ValueError):
    pass


class GradcheckError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass
