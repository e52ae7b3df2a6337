"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    pass


class AlignmentError(ValueError):
    """Durations do not partition the frame axis."""


class VocabularyError(IndexError):
    pass


class RegistryError(KeyError):
    """Unknown speaker or language tag."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown registry entry"


class UnsupportedOperationError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    """Non-finite values in a forward pass or loss term."""


class InputError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint is corrupt, truncated, or incompatible."""


class StatsError(ValueError):
    pass


class TransientServiceError(RuntimeError):
    """A retriable failure from an external service."""
