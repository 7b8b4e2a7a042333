"""Switch-routed mixture-of-experts sequence models for multi-language transduction."""

from .errors import DimensionError, ParameterError, TrainingDivergedError
from .models import ModelConfig, build_model, count_parameters, preset
from .moe import RouterConfig, aux_loss, expert_capacity, moe_forward
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

__all__ = [
    "DimensionError",
    "ModelConfig",
    "ParameterError",
    "RouterConfig",
    "Tensor",
    "TrainConfig",
    "TrainingDivergedError",
    "aux_loss",
    "build_model",
    "count_parameters",
    "evaluate",
    "expert_capacity",
    "moe_forward",
    "no_grad",
    "preset",
    "train",
]
