"""Exception types shared across the package.

Every failure mode gets its own class so callers can match on the
condition rather than on message text.
"""


class MmdetectError(Exception):
    """Base class for all package errors."""


# --- tensor core ---------------------------------------------------------

class ShapeMismatch(MmdetectError):
    pass


class NonScalarLoss(MmdetectError):
    pass


class AllMaskedRow(MmdetectError):
    """A softmax/attention row with no allowed position."""


class NonFiniteGradient(MmdetectError):
    """A NaN/Inf gradient reached the optimizer; the step was aborted."""


class NonFiniteLoss(MmdetectError):
    """A NaN/Inf loss value was produced during training."""


# --- vqvae ---------------------------------------------------------------

class DimensionMismatch(MmdetectError):
    pass


# mmfr uses the short spelling for the same condition
DimMismatch = DimensionMismatch


class ShapeNotDivisible(MmdetectError):
    pass


class EmptyCorpus(MmdetectError):
    pass


class UntrainedModel(MmdetectError):
    """Reconstruction quality too poor to generate fakes from."""


# --- iafa ----------------------------------------------------------------

class ClipLongerThanNMax(MmdetectError):
    pass


# --- file formats --------------------------------------------------------

class BadMagic(MmdetectError):
    pass


class InvalidHeader(MmdetectError):
    pass


class TruncatedFile(MmdetectError):
    """File ended early; the message names the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class MissingTensor(MmdetectError):
    pass


class UnknownTensor(MmdetectError):
    pass


# --- mmfr providers ------------------------------------------------------

class NoRecords(MmdetectError):
    pass


# --- fusion --------------------------------------------------------------

class WidthMismatch(MmdetectError):
    pass


# --- trainer / corpus ----------------------------------------------------

class VideoTooShort(MmdetectError):
    pass


class SingleClassCorpus(MmdetectError):
    pass


class BadParam(MmdetectError):
    pass


# --- eval ----------------------------------------------------------------

class SingleClass(MmdetectError):
    pass


class DegenerateFeatures(MmdetectError):
    pass


class InvalidCombination(MmdetectError):
    pass
