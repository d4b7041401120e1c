"""MAT: a hybrid selective state-space + multi-head attention forecaster on a numpy autodiff core."""

from .errors import ConfigError, ContractError, DataError, DimensionError, MatError, NumericError
from .model import MatModel, ModelConfig
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "MatError",
    "MatModel",
    "ModelConfig",
    "NumericError",
    "TrainConfig",
    "evaluate",
    "train",
]
