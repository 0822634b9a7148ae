"""Exception types shared across the pipeline stages."""


class AuditError(Exception):
    """Base class for all pipeline errors."""


class IngestionError(AuditError):
    """Raised when an input file or record cannot be read or decoded."""

    def __init__(self, message: str, case_id: str | None = None):
        super().__init__(message)
        self.case_id = case_id


class ConfigurationError(AuditError):
    """Raised for unresolvable tokenizers, embedders, or dimension mismatches."""


class SplitError(AuditError):
    """Raised when a corpus cannot be partitioned into train/test."""


class SamplingError(AuditError):
    """Raised when a random draw is requested from an empty pool."""


class ContaminationError(AuditError):
    """Raised when test-split data leaks into a train-only structure."""


class PromptAssemblyError(AuditError):
    """Raised when a prompt cannot be built for the requested configuration."""


class BackendError(AuditError):
    """Raised when a model endpoint fails after all retries."""

    def __init__(self, message: str, pair_ref: tuple[str, str] | None = None):
        super().__init__(message)
        self.pair_ref = pair_ref


class ExpansionError(AuditError):
    """Raised when a backend-assisted keyword expansion fails."""


class AggregationError(AuditError):
    """Raised when prediction records from mixed configurations are aggregated."""


class ExportError(AuditError):
    """Raised when a fine-tuning dataset cannot be exported."""


class ValidationError(AuditError):
    """Raised for invalid flag combinations or malformed stage inputs."""
