class DimensionError(ValueError):
    """Operand shapes are inconsistent."""


class ParameterError(ValueError):
    """A configuration or hyper-parameter value is out of range."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training objective becomes non-finite."""

    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
