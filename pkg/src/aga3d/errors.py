"""Exception and warning types shared across the toolkit."""


class AgaError(Exception):
    """Base class for every error raised by aga3d."""


class InvalidVolume(AgaError):
    pass


class FormatError(AgaError):
    """Malformed file content. ``offset`` is the byte offset (or row) of the fault."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnsupportedDtype(FormatError):
    pass


class ShapeError(AgaError):
    pass


class EmptyRegion(AgaError):
    pass


class UnknownLabel(AgaError):
    pass


class ZeroVector(AgaError):
    pass


class EmptyPhrase(AgaError):
    pass


class DegenerateExtent(AgaError):
    pass


class OutOfBounds(AgaError):
    pass


class NumericalError(AgaError):
    pass


class ContractError(AgaError):
    pass


class DegenerateBatch(AgaError):
    pass


class PlacementError(AgaError):
    pass


class SplitError(AgaError):
    pass


class TrainingDiverged(AgaError):
    def __init__(self, epoch, batch, message="loss became non-finite"):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")


class DegenerateIntensity(UserWarning):
    """Constant-intensity input to z-score normalization."""


class MissingRegion(UserWarning):
    """A selected label has no voxels in the grid."""


class EmptySegment(UserWarning):
    """Box-constrained segmentation selected no voxels."""


class TruncatedTopK(UserWarning):
    """K exceeds the number of table entries."""


class UndefinedMetric(UserWarning):
    """A metric could not be computed (e.g. AUC with one class present)."""
