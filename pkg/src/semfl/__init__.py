"""Explainable semantic federated learning simulator.

A small numpy autodiff engine drives a semantic-communication classifier
(encoder, AWGN channel, decoder). Devices train it federatedly; each device
freezes its least important parameters in proportion to its cluster's data
volume, delays follow a Shannon-rate wireless model, and gradient-weighted
heatmaps explain individual semantic features.
"""

from .config import ExperimentConfig
from .experiment import run_experiment
from .model import Architecture, ChannelSpec, SCModel, init_params, load_model, save_model

__all__ = [
    "Architecture", "ChannelSpec", "ExperimentConfig", "SCModel",
    "init_params", "load_model", "run_experiment", "save_model",
]
__version__ = "0.1.0"
