"""Exception types raised across the package."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared where finite values are required."""


class ConvergenceError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    """Training objective blew up; the message carries block/epoch context."""


class BracketError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    pass


class UnboundedError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
