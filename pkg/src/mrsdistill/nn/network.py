"""Residual 1D CNN: stem conv, residual blocks, global average pooling, dense softmax head."""

from __future__ import annotations

import copy
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ShapeError, StateError
from . import layers as L


@dataclass
class NetworkConfig:
    input_length: int = 288
    kernel_width: int = 32
    initial_filters: int = 16
    n_res_blocks: int = 8
    dropout_rate: float = 0.55
    n_classes: int = 2
    # 1-indexed block numbers
    subsample_blocks: tuple[int, ...] = (1, 3, 5, 7)
    filter_double_blocks: tuple[int, ...] = (3, 5, 7)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = "float64"

    def __post_init__(self):
        self.subsample_blocks = tuple(sorted(int(b) for b in self.subsample_blocks))
        self.filter_double_blocks = tuple(sorted(int(b) for b in self.filter_double_blocks))
        if min(self.input_length, self.kernel_width, self.initial_filters, self.n_classes) < 1:
            raise ConfigError("network sizes must be positive")
        if self.n_res_blocks < 0:
            raise ConfigError("n_res_blocks must be nonnegative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for b in self.subsample_blocks + self.filter_double_blocks:
            if not 1 <= b <= self.n_res_blocks:
                raise ConfigError(f"block index {b} outside 1..{self.n_res_blocks}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass(frozen=True)
class BlockSpec:
    index: int
    c_in: int
    c_out: int
    length_in: int
    length_out: int
    # "none": no subsampling; "pool": max-pool both branches before the convs;
    # "stride": stride-2 first conv on the main branch, max-pool on the shortcut
    subsample: str


def block_specs(config: NetworkConfig) -> list[BlockSpec]:
    specs = []
    c, length = config.initial_filters, config.input_length
    for i in range(1, config.n_res_blocks + 1):
        c_out = 2 * c if i in config.filter_double_blocks else c
        if i in config.subsample_blocks:
            mode = "stride" if i in config.filter_double_blocks else "pool"
            out_len = -(-length // 2)
        else:
            mode, out_len = "none", length
        specs.append(BlockSpec(i, c, c_out, length, out_len, mode))
        c, length = c_out, out_len
    return specs


def _bn_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.gamma", f"{prefix}.beta"


class Network:
    """Parameters, running statistics and a forward/backward pass.

    ``params`` holds the trainable tensors; ``buffers`` holds batch-norm running
    statistics. A train-mode forward pass records a tape that ``backward``
    consumes.
    """

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0):
        self.config = config or NetworkConfig()
        self.dtype = np.dtype(self.config.dtype)
        self.blocks = block_specs(self.config)
        self.mode = "eval"
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._tape = None
        self.last_masks: dict = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add_conv(self, name, width, c_in, c_out, rng):
        std = np.sqrt(2.0 / (width * c_in))
        self.params[name] = (rng.standard_normal((width, c_in, c_out)) * std).astype(self.dtype)

    def _add_bn(self, prefix, c):
        g, b = _bn_names(prefix)
        self.params[g] = np.ones(c, dtype=self.dtype)
        self.params[b] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(c, dtype=self.dtype)

    def _init_params(self, rng):
        cfg = self.config
        k = cfg.kernel_width
        self._add_conv("stem.conv", k, 1, cfg.initial_filters, rng)
        self._add_bn("stem.bn", cfg.initial_filters)
        for blk in self.blocks:
            p = f"block{blk.index}"
            self._add_conv(f"{p}.conv1", k, blk.c_in, blk.c_out, rng)
            self._add_bn(f"{p}.bn1", blk.c_out)
            self._add_conv(f"{p}.conv2", k, blk.c_out, blk.c_out, rng)
            self._add_bn(f"{p}.bn2", blk.c_out)
        d = self.feature_channels
        limit = np.sqrt(6.0 / (d + cfg.n_classes))
        self.params["dense.weight"] = rng.uniform(-limit, limit, (cfg.n_classes, d)).astype(self.dtype)
        self.params["dense.bias"] = np.zeros(cfg.n_classes, dtype=self.dtype)

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].c_out if self.blocks else self.config.initial_filters

    @property
    def feature_length(self) -> int:
        return self.blocks[-1].length_out if self.blocks else self.config.input_length

    def conv_kernel_names(self) -> list[str]:
        return [n for n in self.params if n.endswith((".conv", ".conv1", ".conv2"))]

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        self._tape = None
        return self

    def copy(self) -> "Network":
        other = copy.copy(self)
        other.config = copy.deepcopy(self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._tape = None
        return other

    def state_equal(self, other: "Network") -> bool:
        return (
            self.params.keys() == other.params.keys()
            and all(np.array_equal(v, other.params[k]) for k, v in self.params.items())
            and all(np.array_equal(v, other.buffers[k]) for k, v in self.buffers.items())
        )

    # -- forward ----------------------------------------------------------------

    def _prepare_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[1] != self.config.input_length or x.shape[2] != 1:
            raise ShapeError(
                f"expected input [batch, {self.config.input_length}, 1], got {x.shape}")
        return x

    def _bn(self, prefix, x, train):
        g, b = _bn_names(prefix)
        return L.batchnorm_forward(
            x, self.params[g], self.params[b],
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            train=train, eps=self.config.bn_eps, momentum=self.config.bn_momentum)

    def _block_forward(self, x, blk: BlockSpec, train: bool, mask):
        p = f"block{blk.index}"
        cache = {}
        if blk.subsample == "pool":
            x, cache["pool"] = L.maxpool2_forward(x)
            main_in, short = x, x
        elif blk.subsample == "stride":
            main_in = x
            short, cache["pool"] = L.maxpool2_forward(x)
        else:
            main_in, short = x, x
        stride = 2 if blk.subsample == "stride" else 1
        h, cache["conv1"] = L.conv1d_forward(main_in, self.params[f"{p}.conv1"], stride)
        h, cache["bn1"] = self._bn(f"{p}.bn1", h, train)
        h, cache["relu1"] = L.relu_forward(h)
        if mask is not None:
            if mask.shape != h.shape:
                raise ShapeError(f"{p}: dropout mask {mask.shape} vs activation {h.shape}")
            h = h * mask
        cache["mask"] = mask
        h, cache["conv2"] = L.conv1d_forward(h, self.params[f"{p}.conv2"], 1)
        h, cache["bn2"] = self._bn(f"{p}.bn2", h, train)
        short = L.pad_channels(short, blk.c_out)
        if short.shape != h.shape:
            raise ShapeError(f"{p}: residual add of {h.shape} and {short.shape}")
        out, cache["relu2"] = L.relu_forward(h + short)
        return out, cache

    def forward(self, x, rng: np.random.Generator | None = None,
                masks: dict[int, np.ndarray] | None = None, trace: list | None = None):
        """Return logits ``[batch, n_classes]``.

        In train mode, dropout masks come from ``masks`` (block index -> mask)
        when given, else are sampled from ``rng``. The masks used are kept on
        the tape (``net.last_masks``).
        """
        train = self.mode == "train"
        x = self._prepare_input(x)
        if train and masks is None and rng is None and self.config.dropout_rate > 0:
            raise StateError("train-mode forward needs an rng or explicit dropout masks")
        tape = {}
        h, tape["stem.conv"] = L.conv1d_forward(x, self.params["stem.conv"], 1)
        h, tape["stem.bn"] = self._bn("stem.bn", h, train)
        h, tape["stem.relu"] = L.relu_forward(h)
        if trace is not None:
            trace.append(("stem", h.shape))
        used_masks = {}
        block_caches = []
        for blk in self.blocks:
            mask = None
            if train and self.config.dropout_rate > 0:
                if masks is not None:
                    mask = masks[blk.index]
                else:
                    shape = (x.shape[0], blk.length_out, blk.c_out)
                    mask = L.dropout_mask(shape, self.config.dropout_rate, rng, self.dtype)
            used_masks[blk.index] = mask
            h, cache = self._block_forward(h, blk, train, mask)
            block_caches.append(cache)
            if trace is not None:
                trace.append((f"block{blk.index}", h.shape))
        features = h
        pooled = L.gap_forward(features)
        if trace is not None:
            trace.append(("gap", pooled.shape))
        logits = L.dense_forward(pooled, self.params["dense.weight"], self.params["dense.bias"])
        if trace is not None:
            trace.append(("dense", logits.shape))
        if train:
            tape.update(blocks=block_caches, features_len=features.shape[1],
                        pooled=pooled, logits=logits, batch=x.shape[0])
            self._tape = tape
            self.last_masks = used_masks
        return logits

    def features(self, x) -> np.ndarray:
        """Final pre-GAP feature map ``[batch, length, channels]`` in eval mode."""
        saved = self.mode
        self.mode = "eval"
        try:
            x = self._prepare_input(x)
            h, _ = L.conv1d_forward(x, self.params["stem.conv"], 1)
            h, _ = self._bn("stem.bn", h, False)
            h, _ = L.relu_forward(h)
            for blk in self.blocks:
                h, _ = self._block_forward(h, blk, False, None)
            return h
        finally:
            self.mode = saved

    def shape_trace(self, batch_size: int = 32) -> list[tuple[str, tuple[int, ...]]]:
        trace: list = []
        saved = self.mode
        self.mode = "eval"
        try:
            self.forward(np.zeros((batch_size, self.config.input_length, 1)), trace=trace)
        finally:
            self.mode = saved
        return trace

    # -- backward ---------------------------------------------------------------

    def _block_backward(self, dout, blk: BlockSpec, cache, grads):
        p = f"block{blk.index}"
        ds = L.relu_backward(dout, cache["relu2"])
        dshort = ds[..., :blk.c_in]
        dh, grads[f"{p}.bn2.gamma"], grads[f"{p}.bn2.beta"] = L.batchnorm_backward(ds, cache["bn2"])
        dh, grads[f"{p}.conv2"] = L.conv1d_backward(dh, cache["conv2"])
        if cache["mask"] is not None:
            dh = dh * cache["mask"]
        dh = L.relu_backward(dh, cache["relu1"])
        dh, grads[f"{p}.bn1.gamma"], grads[f"{p}.bn1.beta"] = L.batchnorm_backward(dh, cache["bn1"])
        dmain, grads[f"{p}.conv1"] = L.conv1d_backward(dh, cache["conv1"])
        if blk.subsample == "pool":
            return L.maxpool2_backward(dmain + dshort, cache["pool"])
        if blk.subsample == "stride":
            return dmain + L.maxpool2_backward(dshort, cache["pool"])
        return dmain + dshort

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss, given d(loss)/d(logits) for the recorded batch."""
        tape = self._tape
        if tape is None:
            raise StateError("backward called without a recorded train-mode forward pass")
        if dlogits.shape != tape["logits"].shape:
            raise ShapeError(f"dlogits {dlogits.shape} vs logits {tape['logits'].shape}")
        grads: dict[str, np.ndarray] = {}
        dpooled, grads["dense.weight"], grads["dense.bias"] = L.dense_backward(
            dlogits, tape["pooled"], self.params["dense.weight"])
        dh = L.gap_backward(dpooled, tape["features_len"])
        for blk, cache in zip(reversed(self.blocks), reversed(tape["blocks"])):
            dh = self._block_backward(dh, blk, cache, grads)
        dh = L.relu_backward(dh, tape["stem.relu"])
        dh, grads["stem.bn.gamma"], grads["stem.bn.beta"] = L.batchnorm_backward(dh, tape["stem.bn"])
        _, grads["stem.conv"] = L.conv1d_backward(dh, tape["stem.conv"])
        return {k: grads[k] for k in self.params}


def network_forward(net: Network, batch) -> np.ndarray:
    """Class probabilities ``[batch, n_classes]`` under the network's current mode."""
    return L.softmax(net.forward(batch))


def backward(net: Network, batch, labels) -> dict[str, np.ndarray]:
    """Mean cross-entropy gradients for the batch seen by the last train-mode forward."""
    tape = net._tape
    if tape is None:
        raise StateError("backward called before a train-mode forward pass")
    if np.shape(batch)[0] != tape["batch"]:
        raise StateError("backward batch differs from the recorded forward pass")
    _, dlogits = L.softmax_cross_entropy(tape["logits"], labels)
    return net.backward(dlogits)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(path: str | Path, net: Network, optimizer_state: dict | None = None,
                    epoch_log: list | None = None, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding the config, all tensors, Adam state and the epoch log."""
    arrays = {}
    for k, v in net.params.items():
        arrays[f"param/{k}"] = v
    for k, v in net.buffers.items():
        arrays[f"buffer/{k}"] = v
    meta = {"config": asdict(net.config), "epoch_log": epoch_log or [], "extra": extra or {}}
    if optimizer_state is not None:
        meta["adam_t"] = int(optimizer_state["t"])
        for k, v in optimizer_state["m"].items():
            arrays[f"adam_m/{k}"] = v
        for k, v in optimizer_state["v"].items():
            arrays[f"adam_v/{k}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    # fixed member timestamps so identical state gives identical bytes
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)


def load_checkpoint(path: str | Path) -> tuple[Network, dict | None, list, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode("utf-8"))
        net = Network(NetworkConfig.from_dict(meta["config"]))
        state = None
        if "adam_t" in meta:
            state = {"t": meta["adam_t"], "m": {}, "v": {}}
        for key in z.files:
            if key == "meta":
                continue
            kind, name = key.split("/", 1)
            if kind == "param":
                net.params[name] = z[key].copy()
            elif kind == "buffer":
                net.buffers[name] = z[key].copy()
            elif kind == "adam_m":
                state["m"][name] = z[key].copy()
            elif kind == "adam_v":
                state["v"][name] = z[key].copy()
    return net, state, meta["epoch_log"], meta["extra"]
