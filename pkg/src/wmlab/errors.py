"""Exception types shared across the lab."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (bad sizes, seeds, option combos)."""


class CapacityError(ConfigurationError):
    """Payload does not fit the host image under the given geometry."""


class ShapeMismatchError(ValueError):
    """Operands whose array shapes / value ranges must agree do not."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the last finite loss snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ProvenanceError(RuntimeError):
    """Checkpoints that must share a lineage (e.g. extractor/classifier) do not."""
