"""Exception types raised across the package."""


class KidneyPivotError(Exception):
    pass


class DegenerateCloud(KidneyPivotError, ValueError):
    pass


class InvalidReference(KidneyPivotError, ValueError):
    pass


class InvalidCount(KidneyPivotError, ValueError):
    pass


class DegenerateNeighborhood(KidneyPivotError, ValueError):
    pass


class OpenMesh(KidneyPivotError, ValueError):
    pass


class InvalidParams(KidneyPivotError, ValueError):
    pass


class DegenerateAxis(KidneyPivotError, ValueError):
    pass


class EmptyGroundTruth(KidneyPivotError, ValueError):
    pass


class LostKidney(KidneyPivotError, RuntimeError):
    pass


class LostContact(KidneyPivotError, RuntimeError):
    pass


class Unreachable(KidneyPivotError, RuntimeError):
    """The arm cannot reach a requested probe pose."""


class PivotUnreachable(Unreachable):
    pass


class SubjectError(KidneyPivotError):
    """A geometry failure while processing one cohort subject."""

    def __init__(self, index, cause):
        super().__init__(f"subject {index}: {cause}")
        self.index = index
        self.cause = cause


class ConfigError(KidneyPivotError, ValueError):
    pass
