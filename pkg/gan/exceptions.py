class DecganError(Exception):
    """Base class for every error raised by the gan and benchmark apps."""


class DimensionError(DecganError, ValueError):
    def __init__(self, message, left=None, right=None):
        if left is not None and right is not None:
            message = f"{message}: {tuple(left)} vs {tuple(right)}"
        super().__init__(message)
        self.left = left
        self.right = right


class ConfigError(DecganError, ValueError):
    pass


class UsageError(DecganError, RuntimeError):
    pass


class NumericError(DecganError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter
