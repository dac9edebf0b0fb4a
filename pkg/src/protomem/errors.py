"""Exception hierarchy shared across the package."""


class ProtomemError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(ProtomemError):
    """Operand dimensions do not chain."""


class ZeroNormError(ProtomemError):
    """A vector with norm below the 1e-12 floor reached a norm-sensitive op."""


class NoForwardRecordedError(ProtomemError):
    """backward() or sgd_step() called on a tape with no recorded forward pass."""


class FormatVersionMismatchError(ProtomemError):
    """Binary file has the wrong magic, version, or is truncated."""


class CorruptHeaderError(ProtomemError):
    """Dataset file header failed validation."""


class TruncatedPayloadError(ProtomemError):
    """Dataset payload is shorter than the header promises."""


class SizeNotMultipleOfRecordError(ProtomemError):
    """CIFAR batch file size is not a whole number of records."""


class EmptyMemoryError(ProtomemError):
    """classify() called on an explicit memory with no prototypes."""


class OverflowAfterShiftError(ProtomemError):
    """Right-shifted accumulator still exceeds the target bit range."""


class DuplicateClassError(ProtomemError):
    """Class id already present in the explicit memory."""


class EmptySampleSetError(ProtomemError):
    """learn_class() called with no samples."""


class MisalignedMemoriesError(ProtomemError):
    """Explicit memory and activation memory disagree on class ids."""


class InsufficientSamplesError(ProtomemError):
    """A class has fewer samples than the requested split or draw needs."""


class InsufficientClassesError(ProtomemError):
    """Dataset has fewer classes than the requested split needs."""


class ConflictingFlagsError(ProtomemError):
    """Mutually exclusive ablation flags requested together."""


class NumericFailureError(ProtomemError):
    """Training produced a non-finite loss."""


class ConfigError(ProtomemError):
    """Unknown key, bad value, or malformed config file."""
