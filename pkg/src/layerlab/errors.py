"""Exception hierarchy shared across layerlab."""


class LayerLabError(Exception):
    """Base class for every error raised by layerlab."""


class ConfigError(LayerLabError, ValueError):
    pass


class ShapeError(LayerLabError, ValueError):
    pass


class PlanError(LayerLabError, ValueError):
    pass


class SplitError(LayerLabError, ValueError):
    pass


class FitError(LayerLabError, ValueError):
    pass


class MetricError(LayerLabError, ValueError):
    pass


class IngestionError(LayerLabError, ValueError):
    pass


class TrainingError(LayerLabError, RuntimeError):
    """Raised when optimisation produces a non-finite loss."""

    def __init__(self, message: str, step: int, grad_norm: float):
        super().__init__(f"{message} (step={step}, grad_norm={grad_norm:.6g})")
        self.step = step
        self.grad_norm = grad_norm


class CheckpointError(LayerLabError):
    pass
