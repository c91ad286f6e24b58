"""Bi-temporal change detection with feature fusion inside 3-D convolutions."""
from .config import ModelConfig, TrainConfig
from .errors import ConfigurationError, IngestionError, NumericalError, SequencingError
from .model import Model, build_model, count_complexity, count_params, forward
from .params import ParamStore, adam_step
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
