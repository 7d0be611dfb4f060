"""Exception hierarchy shared by every stage of the pipeline."""


class SkullStripError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(SkullStripError, ValueError):
    pass


class InvalidVolume(SkullStripError, ValueError):
    pass


class UnsupportedDatatype(SkullStripError):
    pass


class MalformedHeader(SkullStripError):
    pass


class TruncatedData(SkullStripError):
    pass


class IoFailure(SkullStripError, OSError):
    pass


class IndexOutOfRange(SkullStripError, IndexError):
    pass


class ImageTooSmall(SkullStripError, ValueError):
    pass


class EmptyForeground(SkullStripError):
    pass


class TooFewMarkers(SkullStripError):
    pass


class NoCandidateRegion(SkullStripError):
    pass


class EmptyDataset(SkullStripError, ValueError):
    pass


class NonScalarLoss(SkullStripError, ValueError):
    pass


class MissingGradient(SkullStripError):
    pass


class IndivisibleInput(SkullStripError, ValueError):
    pass


class DatasetTooSmall(SkullStripError, ValueError):
    pass


class CorruptCheckpoint(SkullStripError):
    pass


class VersionMismatch(CorruptCheckpoint):
    pass


class EmptyEvaluation(SkullStripError, ValueError):
    pass


class ParamsError(SkullStripError, ValueError):
    """A key=value parameter file could not be parsed or validated."""


class UnpairedFiles(SkullStripError):
    """A training image has no matching mask file, or the reverse."""

    def __init__(self, stem: str, message: str):
        super().__init__(message)
        self.stem = stem
