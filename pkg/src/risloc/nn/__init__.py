from .arch import ACTIVATIONS, ArchitectureSpec, HeadSpec, ParamViews, init_params, param_count
from .backward import backward_bptt, backward_ff
from .checkpoint import load_params, save_params
from .forward import (
    apply_activation,
    argmax_grouped,
    feed_forward,
    grouped_softmax,
    init_lstm_state,
    lstm_forward,
    lstm_step,
    mse_loss,
    sample_grouped,
    sigmoid,
)
from .optim import AdamState, adam_step

__all__ = [
    "ACTIVATIONS",
    "ArchitectureSpec",
    "HeadSpec",
    "ParamViews",
    "init_params",
    "param_count",
    "backward_bptt",
    "backward_ff",
    "load_params",
    "save_params",
    "apply_activation",
    "argmax_grouped",
    "feed_forward",
    "grouped_softmax",
    "init_lstm_state",
    "lstm_forward",
    "lstm_step",
    "mse_loss",
    "sample_grouped",
    "sigmoid",
    "AdamState",
    "adam_step",
]
