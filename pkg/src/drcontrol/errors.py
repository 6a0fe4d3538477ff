"""Exception types shared across the package."""


class DRControlError(Exception):
    """Base class for all package errors."""


# --- ambiguity -------------------------------------------------------------

class NegativeWeight(DRControlError):
    pass


class WeightSumNotOne(DRControlError):
    pass


class DuplicateSupportPoint(DRControlError):
    pass


class EmptySupport(DRControlError):
    pass


class CapTooSmall(DRControlError):
    pass


class BudgetExceeded(DRControlError):
    def __init__(self, message, size=None):
        super().__init__(message)
        self.size = size


# --- expression DSL --------------------------------------------------------

class ExprError(DRControlError):
    pass


class ExprSyntaxError(ExprError):
    """Malformed expression text; carries the 0-based character position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownIdentifier(ExprError):
    pass


class FutureNoiseReference(ExprError):
    pass


class NonIntegerExponent(ExprError):
    pass


class UnboundVariable(ExprError):
    pass


class NumericalOverflow(DRControlError):
    pass


class DivisionByZero(DRControlError):
    pass


# --- model / documents ------------------------------------------------------

class ValidationError(DRControlError):
    """Aggregated validation report; `issues` lists every failed check."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class DocumentError(DRControlError):
    """Malformed problem/policy document; `path` locates the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class NodeCountMismatch(DRControlError):
    pass


class InadmissiblePerturbation(DRControlError):
    pass


# --- solver ------------------------------------------------------------------

class FitResidualExceeded(DRControlError):
    pass


class InnerSolveFailed(DRControlError):
    pass


class FixedPointDiverged(DRControlError):
    pass
