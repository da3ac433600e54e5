class ConfigurationError(ValueError):
    """An invalid spec, config or data layout was supplied."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""
