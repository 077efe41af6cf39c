"""Exception types shared across the proposal pipeline"""


class ShapeError(ValueError):
    """Array dimensions do not line up"""

    def __init__(self, message: str, expected=None, actual=None):
        if expected is not None or actual is not None:
            message = f"{message} (expected {expected}, got {actual})"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class ConfigError(ValueError):
    """Invalid configuration value; `field` names the offending key when known"""

    def __init__(self, message: str, field: str = None):
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class StatisticsError(ValueError):
    pass


class GenerationError(ValueError):
    pass


class FormatError(ValueError):
    """Corrupt or truncated binary file"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class EvaluationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class TrainingDivergedError(NumericalError):
    """Loss became NaN/Inf during training"""

    def __init__(self, message: str, epoch: int = None, step: int = None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
