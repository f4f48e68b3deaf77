"""Exception hierarchy shared by every crossalign module."""


class CrossAlignError(Exception):
    """Base class for all errors raised by crossalign."""


class DimensionError(CrossAlignError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(CrossAlignError):
    """A caller violated an operation's precondition."""


class FormatError(CrossAlignError):
    """A file does not follow the expected binary/JSON layout."""


class SchemaError(CrossAlignError):
    """Archive content is well-formed but violates a dataset invariant."""


class ConfigError(CrossAlignError):
    """Invalid run or training configuration."""


class MissingModalityError(CrossAlignError):
    """A required modality is absent for the requested entity."""


class SetupError(CrossAlignError):
    """An evaluation was requested on data that cannot support it."""


class SpecError(CrossAlignError):
    """Infeasible synthetic-data specification."""


class InputError(CrossAlignError, ValueError):
    """Invalid numeric input (non-finite values, zero vectors, ...)."""


class NoTermsError(ContractError):
    """Every loss term of a batch is masked; the caller skips the update."""
