"""Exception types shared across the package."""


class ImpactLabError(Exception):
    """Base class for all package errors."""


class MalformedLine(ImpactLabError):
    """A syslog line could not be parsed; carries the offending text."""

    def __init__(self, text: str, reason: str = "unparseable line"):
        self.text = text
        self.reason = reason
        super().__init__(f"{reason}: {text!r}")


class UnknownTemplate(ImpactLabError):
    """Pattern not present in a frozen catalog operating in strict mode."""


class EmptyWindow(ImpactLabError):
    """Vectorization window has zero or negative duration."""


class ScenarioOutOfRange(ImpactLabError):
    """Failure onset or degradation interval falls outside the series."""


class WindowTooLong(ImpactLabError):
    """Requested sample window is longer than the available history."""


class LengthMismatch(ImpactLabError):
    """Two sequences that must be aligned have different lengths."""


class ShapeError(ImpactLabError):
    """Tensor or layer shapes do not conform."""


class GraphStateError(ImpactLabError):
    """Autodiff graph used out of order (backward before forward, missing grads)."""


class NumericsError(ImpactLabError):
    """Non-finite value (NaN/Inf) detected at a layer boundary."""


class CheckpointError(ImpactLabError):
    """Checkpoint file is corrupted, truncated, or has a wrong version."""


class TrainingDiverged(ImpactLabError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class ConfigError(ImpactLabError):
    """Invalid configuration value or unparseable config file."""
