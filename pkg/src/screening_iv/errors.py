"""Exception hierarchy shared across the package."""


class ScreeningIVError(Exception):
    """Base class for all errors raised by this package."""


# dataset validation


class ValidationError(ScreeningIVError, ValueError):
    """A trial record violates a dataset invariant.

    ``record_id`` identifies the first offending record (``None`` for
    dataset-level problems).
    """

    def __init__(self, message, record_id=None):
        super().__init__(message)
        self.record_id = record_id


class DetectAfterEvent(ValidationError):
    pass


class DetectInControlArm(ValidationError):
    pass


class NegativeTime(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class EventBeyondHorizon(ValidationError):
    pass


class ConfigParseError(ScreeningIVError, ValueError):
    pass


# simulation / oracles


class QuadratureNotConverged(ScreeningIVError, ArithmeticError):
    pass


class NoDetectedSubjects(ScreeningIVError):
    pass


class PartialLikelihoodNotConverged(ScreeningIVError, ArithmeticError):
    pass


# nonparametric estimation


class EstimationError(ScreeningIVError):
    """An estimator could not produce a value for the given data.

    ``diagnostics`` carries whatever the estimator knew when it gave up.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class EmptyRiskSet(EstimationError):
    pass


class WrongArmForTransition(EstimationError, ValueError):
    pass


class OccupationOutOfRange(EstimationError, ArithmeticError):
    pass


class NoRootInBracket(EstimationError):
    pass


class InsufficientEvents(EstimationError):
    pass


class DegenerateLikelihood(EstimationError):
    pass


class BoundaryMaximum(EstimationError):
    pass


class ZeroDetectionIncidence(EstimationError):
    pass


class UnstableDenominator(EstimationError):
    pass


class ZeroControlIncidence(EstimationError):
    pass


# inference


class TooManyFailedReplicates(EstimationError):
    pass


class AllPointsFailed(EstimationError):
    pass


class EmptyCurve(ScreeningIVError, ValueError):
    pass
