"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line: 2 for
invalid input (parameters, configuration, initial data), 1 for failures
that happen while a run is in progress.
"""


class RescalingError(Exception):
    exit_code = 1


class ValidationError(RescalingError):
    exit_code = 2


class RuntimeAbort(RescalingError):
    exit_code = 1


# parameters
class SupercriticalOrCritical(ValidationError):
    def __init__(self, flat_star):
        self.flat_star = flat_star
        super().__init__(f"flat_star = {flat_star!r} <= 0: parameters are not subcritical")


class BadExponent(ValidationError):
    pass


class OriginSingularity(ValidationError):
    pass


# grid
class OrderTooHigh(ValidationError):
    pass


class GridTooSmall(ValidationError):
    pass


class NonFiniteIntegrand(RuntimeAbort):
    pass


class OutOfDomain(ValidationError):
    pass


# modulation / initial data
class NoInteriorMax(ValidationError):
    pass


class DegenerateHessian(ValidationError):
    pass


class NormalizationResidual(ValidationError):
    pass


class NonFiniteInput(RuntimeAbort):
    pass


class SingularM(RuntimeAbort):
    pass


class LostPositivity(RuntimeAbort):
    pass


# solvers
class NonPositiveU(RuntimeAbort):
    pass


class NonFiniteField(RuntimeAbort):
    pass


class MaxDrifted(RuntimeAbort):
    pass


# diagnostics / comparison
class OutOfRange(ValidationError):
    pass


class OutsideRescaledDomain(ValidationError):
    pass


class InsufficientGrowth(ValidationError):
    pass


class InsufficientSeries(ValidationError):
    pass


class ParameterMismatch(ValidationError):
    pass


# configuration
class UnknownKey(ValidationError):
    def __init__(self, section, key):
        self.section, self.key = section, key
        super().__init__(f"unknown key [{section}] {key}")


class ConfigTypeError(ValidationError, TypeError):
    def __init__(self, key, message=""):
        self.key = key
        super().__init__(f"bad value for {key}" + (f": {message}" if message else ""))


class MissingRequired(ValidationError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"missing required key {key}")
