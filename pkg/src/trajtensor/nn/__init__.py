"""Small numpy neural-network kit with hand-written backward passes."""

from .gradcheck import GradCheckReport, grad_check, numeric_gradient
from .io import load_weights, save_weights, weights_from_bytes, weights_to_bytes
from .layers import (
    Conv,
    ConvTranspose,
    Crop,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool,
    ReLU,
    Repeat,
    Reshape,
    ShapeError,
    Sigmoid,
    StateError,
    Tanh,
    Transpose,
)
from .network import Sequential, TimeDistributed, gradients, load_parameters, parameter_count, parameters
from .optim import Adam, adam_step, bce_loss
from .recurrent import GRUCell, LSTMCell, Recurrent, gru_step, lstm_step

__all__ = [
    "Adam", "Conv", "ConvTranspose", "Crop", "Dense", "Flatten", "GRUCell", "GlobalAvgPool",
    "GradCheckReport", "LSTMCell", "Layer", "MaxPool", "ReLU", "Recurrent", "Repeat", "Reshape",
    "Sequential", "ShapeError", "Sigmoid", "StateError", "Tanh", "TimeDistributed", "Transpose",
    "adam_step", "bce_loss", "grad_check", "gradients", "gru_step", "load_parameters",
    "load_weights", "lstm_step", "numeric_gradient", "parameter_count", "parameters",
    "save_weights", "weights_from_bytes", "weights_to_bytes",
]
