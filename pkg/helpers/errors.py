from typing import Optional


class InvalidShapeError(ValueError):
    pass


class BoundsError(IndexError):
    pass


class ShapeMismatchError(ValueError):
    pass


class InvalidSchemeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class CalibrationError(ValueError):
    pass


class UnsupportedPlanError(ValueError):
    pass


class RangeError(ValueError):
    """An integer operand lies outside the range its scheme allows"""


class DomainError(ValueError):
    pass


class OverflowRiskError(OverflowError):
    """The 32-bit accumulators could overflow for this layer geometry"""


class UnsafeSchemeError(OverflowError):
    """The Winograd transforms of this scheme pair do not fit the storage width"""


class DeploymentMismatchError(RuntimeError):

    def __init__(self, message: str, *, max_divergence: float, location: tuple[int, ...]):
        super().__init__(message)
        self.max_divergence = max_divergence
        self.location = location


class TrainingDivergedError(FloatingPointError):

    def __init__(self, message: str, *, step: int, losses: Optional[dict[str, float]] = None):
        super().__init__(message)
        self.step = step
        self.losses = losses if losses is not None else {}
