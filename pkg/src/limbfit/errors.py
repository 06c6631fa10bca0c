"""Exception types raised across the package."""


class LimbfitError(Exception):
    """Base class for all package errors."""


class ValidationError(LimbfitError, ValueError):
    """Malformed input or configuration (CLI exit code 1)."""


class NumericError(LimbfitError, ArithmeticError):
    """Numeric failure during evaluation or optimization (CLI exit code 2)."""


class DegenerateLimb(NumericError):
    pass


class InvalidBandwidth(ValidationError):
    pass


class MissingFlow(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"non-finite loss at iteration {iteration}: term {term!r} = {value}")
        self.iteration = iteration
        self.term = term
        self.value = value


class EmptyCloud(ValidationError):
    pass


class MissingAttachment(ValidationError):
    pass


class TooFewPoints(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class EmptyCluster(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NoVisibleJoints(ValidationError):
    pass


class NonSquare(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class FrameCountMismatch(ValidationError):
    pass
