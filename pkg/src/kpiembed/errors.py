"""Exception types shared across the package."""


class KpiEmbedError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(KpiEmbedError):
    """Input header/schema does not match the expected KPI layout."""


class ParameterError(KpiEmbedError):
    """An argument value is outside its documented domain."""


class DimensionError(KpiEmbedError):
    """Operands have incompatible shapes."""


class NumericError(KpiEmbedError):
    """A computation produced NaN or Inf."""


class ContractError(KpiEmbedError):
    """An API contract was violated (frozen parameters, non-scalar loss, ...)."""


class DataError(KpiEmbedError):
    """A dataset is too small or otherwise unusable for the requested operation."""


class ConfigError(KpiEmbedError):
    """A run configuration document is malformed or contains unknown keys."""


class CheckpointError(KpiEmbedError):
    """A model checkpoint is missing, corrupt, or does not match expectations."""


class TrainingError(KpiEmbedError):
    """Training aborted mid-run; carries diagnostics about the failing step."""

    def __init__(self, message, last_finite_loss=None, batch_index=None, epoch=None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
        self.batch_index = batch_index
        self.epoch = epoch
