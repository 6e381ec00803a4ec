"""Exception types shared across the library."""


class TmlabError(Exception):
    """Base class for all tmlab errors."""


class ValidationError(TmlabError):
    """A domain object or configuration value violates its invariants."""


class DatasetFormatError(TmlabError):
    """Malformed dataset file.

    Carries the 1-based line number and the offending sample id when known,
    so parse failures can be located in large files.
    """

    def __init__(self, message, line=None, sample_id=None):
        self.line = line
        self.sample_id = sample_id
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if sample_id is not None:
            prefix += f"sample {sample_id!r}: "
        super().__init__(prefix + message)


class CheckpointError(TmlabError):
    """Malformed, truncated, or version-incompatible checkpoint file."""


class DimensionError(TmlabError):
    """Shapes or class inventories of two artifacts do not agree."""


class ShiftRangeError(TmlabError):
    """A temporal shift exceeds the model's declared maximum shift."""


class EmptyDatasetError(TmlabError):
    """An operation that needs samples received an empty dataset."""


class NumericError(TmlabError):
    """A non-finite value appeared where the computation requires finiteness."""
