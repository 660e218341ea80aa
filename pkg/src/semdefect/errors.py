"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A parameter record violates one of its invariants."""


class ShapeError(ValueError):
    """Tensor shapes disagree or violate a layout constraint."""


class ConfigError(ValueError):
    """A configuration is inconsistent with the requested operation."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (e.g. a constant image)."""


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term, step):
        super().__init__(f"non-finite loss in term '{term}' at step {step}")
        self.term = term
        self.step = step


class StageError(RuntimeError):
    """Wraps a failure inside a named experiment stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.__cause__ = cause
