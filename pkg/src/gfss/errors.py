"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class DataError(ValueError):
    """Input data violates a precondition (labels out of range, empty masks...)."""


class RegistryError(ValueError):
    """Session registry misuse: class overlap, out-of-order sessions."""


class TrainingError(RuntimeError):
    """Training diverged; ``diagnostics`` holds a snapshot of the failing step."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FrozenModelError(TypeError):
    """Attempt to modify a frozen model."""
