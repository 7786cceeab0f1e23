class DomainError(ValueError):
    """Argument outside the domain an operation accepts."""


class ConfigError(ValueError):
    """Inconsistent or unknown configuration."""


class StateError(RuntimeError):
    """Operation called on an object in the wrong state."""


class NumericalError(ArithmeticError):
    pass


class ExtractorUnavailable(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics
