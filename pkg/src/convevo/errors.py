"""Exception types shared across the package.

Everything derives from ConvevoError so callers can catch library failures
in one clause; the second base class keeps isinstance checks against the
stdlib hierarchy working (ValueError for bad inputs, RuntimeError for bad
states reached at run time).
"""


class ConvevoError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ConvevoError, ValueError):
    """An array argument has the wrong rank, size, or dtype-incompatible shape."""


class LabelError(ConvevoError, ValueError):
    """A class label is outside [0, num_classes)."""


class StoreError(ConvevoError, RuntimeError):
    """A weight store is inconsistent with the genome it is paired with."""


class EditError(ConvevoError, ValueError):
    """A mutation edit description does not connect the two genomes it names."""


class InapplicableMutation(ConvevoError):
    """The sampled operator cannot apply to this genome; caller should resample."""


class SearchExhausted(ConvevoError, RuntimeError):
    """No novel valid child was found within the retry budget."""


class DivergedEvaluation(ConvevoError, RuntimeError):
    """Training produced a non-finite loss or non-finite logits."""


class FormatError(ConvevoError, ValueError):
    """A dataset file does not decode under the expected binary layout."""


class SplitSizeError(ConvevoError, ValueError):
    """Requested split sizes cannot be carved from the available examples."""


class ConfigError(ConvevoError, ValueError):
    """A configuration value or file is invalid."""


class CheckpointError(ConvevoError, ValueError):
    """A checkpoint or run-state file cannot be loaded as written."""


class RunFailure(ConvevoError, RuntimeError):
    """Every repetition of at least one experiment arm failed."""
