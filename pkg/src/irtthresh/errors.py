"""Exception types raised across the package."""


class ThresholdsError(Exception):
    """Base class for all package errors."""


class ValidationError(ThresholdsError, ValueError):
    """Input data or configuration violates a declared invariant."""


class UnknownItem(ValidationError):
    pass


class ValueOutOfSupport(ValidationError):
    def __init__(self, row, column, value, detail=""):
        self.row, self.column, self.value = row, column, value
        msg = f"value {value!r} at row {row}, column {column!r} is outside the item support"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyItem(ValidationError):
    pass


class EmptyPerson(ValidationError):
    pass


class DegenerateRange(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class NotANumber(ThresholdsError, ValueError):
    pass


class ProbabilityOutOfRange(ThresholdsError, ValueError):
    pass


class OutOfSupport(ThresholdsError, ValueError):
    pass


class OutOfRange(ThresholdsError, ValueError):
    pass


class NotDifferentiable(ThresholdsError):
    pass


class NonMonotoneInput(ThresholdsError, ValueError):
    pass


class ZeroDerivative(ThresholdsError, ArithmeticError):
    pass


class NumericalUnderflow(ThresholdsError, ArithmeticError):
    pass


class NonFiniteLikelihood(ThresholdsError, ArithmeticError):
    def __init__(self, person):
        self.person = person
        super().__init__(f"non-finite log-likelihood contribution for person {person}")


class WrongMode(ThresholdsError):
    pass


class NotConverged(ThresholdsError):
    pass


class SingularInformation(ThresholdsError, ArithmeticError):
    pass


class NotNested(ThresholdsError):
    pass


class NoObservedItems(ThresholdsError, ValueError):
    pass
