"""Exception types shared across the library."""


class DynlatError(Exception):
    """Base class for all dynlat errors."""


class GranularityMismatch(DynlatError):
    """A spatial/channel granularity does not divide the governed dimension."""


class ParadigmFieldMissing(DynlatError):
    """A DynamicConfig lacks the granularity field its paradigm requires."""


class UnknownDevice(DynlatError):
    """Requested hardware preset does not exist."""


class UnknownNetwork(DynlatError):
    """Requested architecture is not in the zoo."""


class ShapeMismatch(DynlatError):
    """Tensor or layer shapes are inconsistent."""


class MaskShapeMismatch(DynlatError):
    """A mask does not match the feature it is applied to."""


class ProfileCountMismatch(DynlatError):
    """Number of activation profiles does not match the number of blocks."""


class PlanLengthMismatch(DynlatError):
    """A granularity plan has the wrong number of per-stage entries."""


class LengthMismatch(DynlatError):
    """Paired sequences have different lengths."""


class StepOutOfRange(DynlatError):
    """A schedule was queried outside [0, total_steps]."""


class SpecFileError(DynlatError):
    """A hardware or architecture spec file is malformed."""
