"""Exception hierarchy.

Every failure carries enough context to say which hypothesis or numerical
step broke; the CLI maps the families below onto exit codes.
"""


class DALabError(Exception):
    """Base class for all package errors."""


class ConfigError(DALabError):
    """Malformed or out-of-range experiment configuration."""


class LinearAlgebraError(DALabError, ValueError):
    """A matrix fails one of the hypotheses required of a linearization."""


class NotUnimodular(LinearAlgebraError):
    pass


class NotHyperbolic(LinearAlgebraError):
    pass


class NotSplit(LinearAlgebraError):
    pass


class CertificationFailed(DALabError):
    def __init__(self, message, point=None, index=None):
        super().__init__(message)
        self.point = point
        self.index = index


class SplittingMismatch(DALabError):
    pass


class NumericalError(DALabError):
    """Family of numerical non-convergence failures."""


class NoConvergence(NumericalError):
    pass


class InverseUnavailable(NumericalError):
    pass


class ComplexEigenvalues(NumericalError):
    pass


class IncompleteData(NumericalError):
    pass


class PeriodTooLarge(NumericalError):
    pass


class SignFlip(NumericalError):
    pass


class LeafCollision(NumericalError):
    pass


class LeafEscape(NumericalError):
    pass


class NoCrossing(NumericalError):
    pass


class InsufficientSamples(NumericalError):
    pass


class NoSuchM(NumericalError):
    pass


class SchemaMismatch(DALabError):
    pass
