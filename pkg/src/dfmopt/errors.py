"""Exception hierarchy shared by all dfmopt modules."""


class DfmError(Exception):
    """Base class for every error raised by dfmopt."""


class InvalidParameter(DfmError, ValueError):
    pass


class OffPlane(DfmError, ValueError):
    pass


class InvalidGeometry(DfmError, ValueError):
    pass


class NonSegmentIntersection(DfmError):
    """Two fractures overlap in a two-dimensional region."""


class AssumptionViolated(DfmError):
    """A trace segment is shared by more than two fractures."""


class EmptyInterface(DfmError):
    pass


class SingularOperator(DfmError):
    pass


class InnerSolveFailure(DfmError):
    pass


class NonPositiveCurvature(DfmError):
    """Raised when a CG direction has d^T G d <= 0."""


class MaxIterReached(DfmError):
    pass


class SingularMatrix(DfmError):
    pass


class DegenerateFit(DfmError, ValueError):
    pass


class GenerationFailed(DfmError):
    pass


class ConfigError(DfmError, ValueError):
    pass
