"""Numpy residual 1D CNN with hand-written reverse-mode gradients."""

from .layers import conv1d_forward, batchnorm_forward, cross_entropy_loss, softmax
from .network import (
    Network,
    NetworkConfig,
    backward,
    block_specs,
    load_checkpoint,
    network_forward,
    save_checkpoint,
)
from .training import TrainConfig, TrainResult, Trainer, adam_init, adam_step, predict_proba, train

__all__ = [
    "Network", "NetworkConfig", "TrainConfig", "TrainResult", "Trainer",
    "adam_init", "adam_step", "backward", "batchnorm_forward", "block_specs",
    "conv1d_forward", "cross_entropy_loss", "load_checkpoint", "network_forward",
    "predict_proba", "save_checkpoint", "softmax", "train",
]
