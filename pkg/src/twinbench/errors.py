"""Exception hierarchy shared across the benchmark modules."""


class TwinbenchError(Exception):
    """Base class for all harness errors."""


class UnreadableFile(TwinbenchError):
    pass


class UnsupportedFormat(TwinbenchError):
    pass


class EmptyMesh(TwinbenchError):
    pass


class EmptyCloud(TwinbenchError):
    pass


class DegenerateCloud(TwinbenchError):
    """Point cloud covariance has rank < 3; scale estimation is ill-posed."""


class NonFiniteUpdate(TwinbenchError):
    """ICP produced a non-finite transform (degenerate correspondences)."""


class AllPointsOccluded(TwinbenchError):
    """Occlusion mask removed every point of one cloud during masked ICP."""


class EmptyPartition(TwinbenchError):
    """Visible/occluded split left one side empty. Reportable, not fatal."""


class DegenerateHull(TwinbenchError):
    """Convex hull has rank < 3; resting-pose enumeration is undefined."""


class NonFiniteState(TwinbenchError):
    """Rigid-body integration blew up."""


class NoGraspsFound(TwinbenchError):
    """Sampling budget exhausted without a single valid grasp."""


class NoContact(TwinbenchError):
    """Finger closing sweep missed the target mesh entirely."""


class SchemaViolation(TwinbenchError):
    """Manifest failed validation. Carries a JSON pointer to the offense."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{message} (at {pointer or '/'})")
        self.pointer = pointer


class MissingFile(TwinbenchError):
    pass


class IOFailure(TwinbenchError):
    pass
