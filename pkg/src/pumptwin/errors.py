"""Exception hierarchy. The CLI maps ValidationError to exit 2, NumericalError to 3."""


class PumpTwinError(Exception):
    pass


class ValidationError(PumpTwinError, ValueError):
    """Bad argument, bad config, or violated precondition."""


class ShapeError(ValidationError):
    pass


class DependencyError(ValidationError):
    """A pipeline stage was requested before the stage it depends on."""


class UnsupportedArchitectureError(ValidationError):
    pass


class IllPosedError(ValidationError):
    pass


class NumericalError(PumpTwinError, ArithmeticError):
    """Non-finite values, divergence, or an unusable discretisation."""


class DiscretizationError(NumericalError):
    pass


class CalibrationError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass
