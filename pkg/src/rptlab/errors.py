"""Exception types raised across rptlab."""


class RptLabError(Exception):
    """Base class for library errors."""


class InvalidWeightsError(RptLabError, ValueError):
    pass


class DimensionError(RptLabError, ValueError):
    pass


class RangeError(RptLabError, ValueError):
    pass


class DegenerateConditioningError(RptLabError, ValueError):
    """A conditioning slice has zero mass."""


class ConvergenceError(RptLabError, RuntimeError):
    """Power iteration failed to reach the requested residual."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NonErgodicError(RptLabError, ValueError):
    pass


class DegenerateRatioError(RptLabError, ZeroDivisionError):
    pass


class ParameterError(RptLabError, ValueError):
    pass


class StructureError(RptLabError, ValueError):
    """A permutation does not have the expected block structure."""


class InsufficientContextError(RptLabError, ValueError):
    pass


class EmptyBatchError(RptLabError, ValueError):
    pass


class TrainingDivergedError(RptLabError, RuntimeError):
    pass


class UnsupportedOffsetError(RptLabError, ValueError):
    pass


class ConfigError(RptLabError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ReportValidationError(RptLabError, ValueError):
    pass
