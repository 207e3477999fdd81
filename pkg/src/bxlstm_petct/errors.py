"""Exception types raised across the package."""


class PipelineError(Exception):
    """Base class for all package errors."""


# tensor / autodiff
class ShapeMismatch(PipelineError, ValueError):
    pass


class InvalidStride(PipelineError, ValueError):
    pass


class NonScalarRoot(PipelineError, ValueError):
    pass


class NonScalarOutput(PipelineError, ValueError):
    pass


# volume io
class MalformedHeader(PipelineError, ValueError):
    pass


class SizeMismatch(PipelineError, ValueError):
    pass


class InvalidSpacing(PipelineError, ValueError):
    pass


class DegenerateVolume(PipelineError, ValueError):
    pass


class InvalidSpec(PipelineError, ValueError):
    pass


class UnalignedCase(PipelineError, ValueError):
    pass


# network / checkpoints
class InvalidConfig(PipelineError, ValueError):
    pass


class VersionMismatch(PipelineError, ValueError):
    pass


class ShapeConflict(PipelineError, ValueError):
    pass


class IncompatibleInit(PipelineError, ValueError):
    pass


# training
class IndivisiblePatch(PipelineError, ValueError):
    pass


class EmptyMask(PipelineError, ValueError):
    pass


class DivergedLoss(PipelineError, RuntimeError):
    pass


class TooFewCases(PipelineError, ValueError):
    pass


class NonBinaryTarget(PipelineError, ValueError):
    pass


# metrics
class DimMismatch(PipelineError, ValueError):
    pass


class EmptyList(PipelineError, ValueError):
    pass
