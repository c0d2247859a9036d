"""Exception types shared across the lab."""


class InvalidInputError(ValueError):
    """Raised when an operation receives non-finite or malformed input."""


class ConfigurationError(ValueError):
    """Raised when a configuration is internally inconsistent (e.g. capacity < 1)."""


class BatchCompositionError(ValueError):
    """Raised when an adversarial batch cannot be assembled as requested."""


class BlockerUnavailableError(RuntimeError):
    """Raised when no blocking sequence can be found for an expert."""

    def __init__(self, expert: int, attempts: int):
        super().__init__(
            f"no blocking chunk found for expert {expert} after {attempts} attempts"
        )
        self.expert = expert
        self.attempts = attempts


class PositionUndefinedError(RuntimeError):
    """Raised when the probe token is not selected by the target expert locally."""


class PathRecoveryError(RuntimeError):
    """Raised when no path-table entry matches the observed logits closely enough."""
