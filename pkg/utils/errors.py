"""Exception hierarchy. Each error carries the CLI exit code it maps to."""

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_SUITE = 3


class LabError(Exception):
    exit_code = EXIT_VALIDATION


# validation


class InvalidParameterError(LabError, ValueError):
    def __init__(self, field: str, value, reason: str):
        self.field = field
        self.value = value
        self.reason = reason
        super().__init__(f"invalid parameter '{field}'={value!r}: {reason}")


class SpecParseError(LabError, ValueError):
    def __init__(self, text: str, position: int, reason: str):
        self.text = text
        self.position = position
        self.reason = reason
        pointer = " " * position + "^"
        super().__init__(f"cannot parse '{text}' at position {position}: {reason}\n  {text}\n  {pointer}")


class SampleParseError(LabError, ValueError):
    def __init__(self, source: str, row: int, column: int, reason: str):
        self.source = source
        self.row = row
        self.column = column
        super().__init__(f"{source}: row {row}, column {column}: {reason}")


class EmptySampleFileError(LabError, ValueError):
    pass


class InvalidMdpError(LabError, ValueError):
    pass


class SizeBoundExceededError(LabError, ValueError):
    pass


class EmptyUpperTailError(LabError, ValueError):
    pass


# numeric


class NumericFailure(LabError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class ThresholdTooDeepError(NumericFailure):
    pass


class DivergentNormalizerError(NumericFailure):
    pass


class QuadratureFailureError(NumericFailure):
    def __init__(self, message: str, residual: float = float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual estimate {residual:.3g})")


class DenominatorUnderflowError(NumericFailure):
    pass


class BudgetExhaustedError(NumericFailure):
    def __init__(self, estimate: float, error: float, cap: float):
        self.estimate = estimate
        self.error = error
        self.cap = cap
        super().__init__(f"error estimate {error:.3g} exceeds cap {cap:.3g} (estimate {estimate:.6g})")


class SupportMismatchError(NumericFailure):
    pass


class InsufficientPositiveTailError(NumericFailure):
    pass


# suites


class SuiteFailureError(LabError):
    exit_code = EXIT_SUITE
