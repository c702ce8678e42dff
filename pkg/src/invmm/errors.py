"""Exception hierarchy shared across the package."""


class InvMMError(Exception):
    """Base class for package errors."""


class ContractError(InvMMError, ValueError):
    """A caller broke an operation's precondition (shape, range, mode)."""


class ConfigError(InvMMError, ValueError):
    """Invalid configuration value; the CLI maps this to exit code 2."""


class TrainingError(InvMMError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class InversionError(InvMMError, RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class CheckpointError(InvMMError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{message}: {field}" if field else message)
        self.field = field


class CalibrationError(InvMMError, ValueError):
    """Replication threshold cannot be calibrated from the given images."""


class MetricError(InvMMError, ValueError):
    """Ranking metric inputs are degenerate (e.g. a single class)."""


class ManifestError(InvMMError, ValueError):
    """Experiment grid does not resolve to checkpoints/results."""
