"""Adam optimizer, mini-batch training loop and batched inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DivergenceError
from ..evaluation import auc_score
from ..rng import make_rng
from ..spectra import Dataset
from . import layers as L
from .network import Network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    # keep the parameters of the epoch with the best validation AUC
    select_best: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
              t: int, cfg: TrainConfig) -> tuple[dict, dict]:
    """One bias-corrected Adam update, in place. ``t`` is the 1-based step count."""
    if t < 1:
        raise ConfigError(f"Adam step index must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {t}")
    b1, b2 = cfg.beta1, cfg.beta2
    lr_t = cfg.learning_rate * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = cfg.epsilon_adam * math.sqrt(1.0 - b2**t)
    for name, g in grads.items():
        m, v = state["m"][name], state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(params[name].dtype)
    state["t"] = t
    return params, state


def _as_inputs(data) -> np.ndarray:
    return data.values if isinstance(data, Dataset) else np.asarray(data)


def predict_proba(net: Network, data, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, one row per spectrum, in input order."""
    x = _as_inputs(data)
    saved = net.mode
    net.mode = "eval"
    try:
        out = [L.softmax(net.forward(x[i:i + batch_size]).astype(np.float64))
               for i in range(0, len(x), batch_size)]
    finally:
        net.mode = saved
    return np.concatenate(out) if out else np.zeros((0, net.config.n_classes))


@dataclass
class TrainResult:
    network: Network
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    optimizer_state: dict | None = None


class Trainer:
    """Epoch-at-a-time training; ``train`` and the distillation loop both drive it."""

    def __init__(self, net: Network, train_set: Dataset, cfg: TrainConfig):
        n0, n1 = train_set.class_counts()
        if len(train_set) == 0:
            raise ConfigError("empty training set")
        if n0 == 0 or n1 == 0:
            raise ConfigError("training set must contain both classes")
        self.net = net
        self.data = train_set
        self.cfg = cfg
        self.state = adam_init(net.params)
        self.epoch = 0
        self._shuffle_rng = make_rng(cfg.seed, "shuffle")
        self._dropout_rng = make_rng(cfg.seed, "dropout")

    def run_epoch(self) -> float:
        """Train one epoch; returns the size-weighted mean mini-batch loss."""
        net, cfg = self.net, self.cfg
        x = self.data.values.astype(net.dtype)
        y = self.data.labels
        order = self._shuffle_rng.permutation(len(x))
        net.train()
        self.epoch += 1
        total = 0.0
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits = net.forward(x[idx], rng=self._dropout_rng)
            loss, dlogits = L.softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {self.epoch}, batch {b}")
            grads = net.backward(dlogits.astype(net.dtype))
            adam_step(net.params, grads, self.state, self.state["t"] + 1, cfg)
            total += loss * len(idx)
        net.eval()
        return total / len(x)


def validation_auc(net: Network, valid_set: Dataset | None) -> float | None:
    if valid_set is None or len(set(valid_set.labels.tolist())) < 2:
        return None
    return auc_score(predict_proba(net, valid_set)[:, 1], valid_set.labels)


def train(net: Network, train_set: Dataset, valid_set: Dataset | None,
          cfg: TrainConfig) -> TrainResult:
    """Train ``net`` in place and return it with a per-epoch log.

    When ``cfg.select_best`` is set and a two-class validation set is given,
    the returned parameters are those of the epoch with the highest validation
    AUC (earliest on ties); otherwise the final epoch's.
    """
    trainer = Trainer(net, train_set, cfg)
    result = TrainResult(network=net, optimizer_state=trainer.state)
    best_auc, best_state = -math.inf, None
    for _ in range(cfg.epochs):
        loss = trainer.run_epoch()
        vauc = validation_auc(net, valid_set)
        result.log.append({"epoch": trainer.epoch, "train_loss": loss, "valid_auc": vauc})
        log.info("epoch %d  loss %.5f  valid_auc %s", trainer.epoch, loss,
                 "n/a" if vauc is None else f"{vauc:.4f}")
        if cfg.select_best and vauc is not None and vauc > best_auc:
            best_auc, best_state = vauc, net.copy()
            result.best_epoch = trainer.epoch
    if best_state is not None:
        net.params, net.buffers = best_state.params, best_state.buffers
    net.eval()
    return result
