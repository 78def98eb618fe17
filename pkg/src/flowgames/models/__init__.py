from .adam import DenseAdam, NonFiniteGradientError, TabularAdam
from .tabular import LazyRows, TabularModel, masked_log_softmax

__all__ = [
    "DenseAdam",
    "LazyRows",
    "NonFiniteGradientError",
    "TabularAdam",
    "TabularModel",
    "masked_log_softmax",
]
