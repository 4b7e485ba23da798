"""Exception types shared across the toolkit.

Every error raised on a documented failure path derives from KnnfuseError,
so callers (and the CLI) can distinguish contract violations from bugs.
"""


class KnnfuseError(Exception):
    """Base class for all documented toolkit errors."""


class MalformedHeader(KnnfuseError):
    """File header is missing, truncated, or structurally invalid."""


class DimensionMismatch(KnnfuseError):
    """Array or row dimensions disagree with the declared layout."""


class LabelOutOfRange(KnnfuseError):
    """A label is not an integer in [0, class_count)."""


class NonFiniteValue(KnnfuseError):
    """A feature value is NaN or infinite."""


class IoFailure(KnnfuseError):
    """Underlying read/write failed (bad path, permissions, disk)."""


class ZeroVector(KnnfuseError):
    """A vector with zero L2 norm reached an L2-normalization step."""


class EmptySplit(KnnfuseError):
    """A requested dataset split received zero samples."""


class KTooLarge(KnnfuseError):
    """Requested neighbor count exceeds the available candidates."""


class NonFiniteActivation(KnnfuseError):
    """A model forward pass produced NaN or infinite activations."""


class DivergedLoss(KnnfuseError):
    """Training loss became non-finite."""


class LengthMismatch(KnnfuseError):
    """Prediction and truth arrays have different (or zero) lengths."""


class UsageError(KnnfuseError):
    """Command line arguments do not match any subcommand grammar."""


class UnknownBackbone(KnnfuseError):
    """Requested backbone is not in the exporter registry."""
