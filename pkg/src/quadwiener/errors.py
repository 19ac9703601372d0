"""Exception hierarchy shared by all modules."""


class QuadWienerError(Exception):
    """Base class for every error raised by the package."""


class NumericFailure(QuadWienerError):
    """A computation left its domain of validity (maps to CLI exit code 4)."""


class SpecError(QuadWienerError, ValueError):
    """Bad user input or configuration (maps to CLI exit code 2)."""


# linalg
class NonSymmetric(SpecError):
    pass


class NoConvergence(NumericFailure):
    pass


class SingularCh(NumericFailure):
    pass


class DimensionMismatch(SpecError):
    pass


class EigenFailure(NumericFailure):
    pass


class RepeatedEigenvalue(NumericFailure):
    pass


class IllConditionedVandermonde(NumericFailure):
    pass


class SingularEntry(NumericFailure):
    pass


class RepeatedNode(SpecError):
    pass


# kernel
class UnknownFamily(SpecError):
    pass


class BadParams(SpecError):
    pass


class NotIntegrable(NumericFailure):
    pass


class SingularOperator(NumericFailure):
    pass


# ode
class NonFinite(NumericFailure):
    pass


class SingularS(NumericFailure):
    pass


# laplace
class Blowup(NumericFailure):
    pass


class DomainError(SpecError):
    pass


class BranchTrackingFailure(NumericFailure):
    pass


class TailTooHeavy(NumericFailure):
    pass


# feynmankac
class NotSPD(SpecError):
    pass


class SingularV0(NumericFailure):
    pass


class QuadratureNotConverged(NumericFailure):
    pass


# montecarlo
class ShapeMismatch(SpecError):
    pass


class BandwidthTooSmall(NumericFailure):
    pass


class VarianceWarning(UserWarning):
    pass


# special
class DifferentiationUnstable(NumericFailure):
    pass


class RootBracketFailure(NumericFailure):
    pass


class NonPositiveMass(NumericFailure):
    pass


# pinned
class DegenerateJN(NumericFailure):
    pass


class DependentPins(NumericFailure):
    pass
