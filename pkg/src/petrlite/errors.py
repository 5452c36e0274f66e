"""Exception hierarchy shared by every petrlite module."""


class PetrError(Exception):
    """Base class for all errors raised by petrlite."""


class DimensionError(PetrError, ValueError):
    """Array shapes are incompatible for the requested operation."""


class ParameterError(PetrError, ValueError):
    """A scalar parameter is outside its valid range."""


class ContractError(PetrError, ValueError):
    """A precondition of an operation was violated by the caller."""


class GeometryError(PetrError, ArithmeticError):
    """A camera transform cannot be inverted or is otherwise degenerate."""


class ConfigError(PetrError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(PetrError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, step: int, batch_seeds: list[int]):
        self.step = step
        self.batch_seeds = batch_seeds
        super().__init__(f"{message} (step {step}, batch seeds {batch_seeds})")
