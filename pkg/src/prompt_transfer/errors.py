"""Exception types raised across the package."""


class PromptTransferError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PromptTransferError, ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class NonFiniteError(PromptTransferError, FloatingPointError):
    """A NaN or infinite value entered or left an operation."""


class TapeError(PromptTransferError, RuntimeError):
    """Misuse of the autodiff tape (e.g. backward from a non-scalar)."""


class MissingGradientError(PromptTransferError, RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


class FrozenModelError(PromptTransferError, RuntimeError):
    """A frozen backbone parameter was offered to an optimizer, or an
    operation requiring a frozen model received an unfrozen one."""


class VocabularyError(PromptTransferError, KeyError):
    """A token is missing from the vocabulary."""

    def __str__(self) -> str:  # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ConfigError(PromptTransferError, ValueError):
    """A configuration document violates its schema."""


class DegenerateStateError(PromptTransferError, ValueError):
    """A similarity is undefined for the given operands (zero norm,
    all-zero activation state, constant ranking)."""


class DigestMismatchError(PromptTransferError, ValueError):
    """A prompt or file belongs to a different model than expected."""


class CorruptFileError(PromptTransferError, ValueError):
    """A stored artifact is truncated or fails its integrity digest."""


class UnsupportedFormatError(PromptTransferError, ValueError):
    """A file does not carry this package's magic bytes."""


class UnsupportedVersionError(PromptTransferError, ValueError):
    """A file was written by an unknown format version."""
