"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    """Invalid model, schedule, or experiment configuration."""


class ProbeError(RuntimeError):
    """A Fisher probe could not be computed."""


class ScheduleError(RuntimeError):
    """The unfreezing scheduler failed to select layers."""


class StatsError(ValueError):
    """Curve statistics requested on unusable input."""


class TrainingError(RuntimeError):
    """A training run aborted (e.g. non-finite loss)."""


class ParseError(ValueError):
    """A data or checkpoint file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NormalizationWarning(UserWarning):
    """Min-max normalization of a constant series."""
