"""Exception hierarchy shared by every petcm module."""


class PetCMError(Exception):
    """Base class for all petcm errors."""


class ShapeMismatch(PetCMError, ValueError):
    pass


class DegenerateRange(PetCMError, ValueError):
    pass


class InvalidSchedule(PetCMError, ValueError):
    pass


class ZeroTimestep(PetCMError, ValueError):
    pass


class ZeroDenominator(PetCMError, ZeroDivisionError):
    pass


class OddDimension(PetCMError, ValueError):
    pass


class IndivisibleSize(PetCMError, ValueError):
    pass


class TimestepBelowEps(PetCMError, ValueError):
    pass


class NoRecordedGraph(PetCMError, RuntimeError):
    pass


class IndexOutOfGrid(PetCMError, IndexError):
    pass


class NonFiniteGradient(PetCMError, FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class EmptyDataset(PetCMError, ValueError):
    pass


class InvalidPlan(PetCMError, ValueError):
    pass


class EmptyList(PetCMError, ValueError):
    pass


class TargetTooSmall(PetCMError, ValueError):
    pass


class PatchTooLarge(PetCMError, ValueError):
    pass


class LayoutMismatch(PetCMError, ValueError):
    pass


class TooSmallForScales(PetCMError, ValueError):
    pass


class ConstantImage(PetCMError, ValueError):
    pass


class EmptyRoi(PetCMError, ValueError):
    pass


class NegativeActivity(PetCMError, ValueError):
    pass


class ChecksumMismatch(PetCMError, IOError):
    pass
