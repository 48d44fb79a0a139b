"""Central finite-difference check of the network's analytic gradients."""

import numpy as np

from mrsdistill.nn import Network, NetworkConfig
from mrsdistill.nn.layers import softmax_cross_entropy


def random_mini_config(r: np.random.Generator) -> NetworkConfig:
    n_blocks = int(r.integers(1, 4))
    blocks = list(range(1, n_blocks + 1))
    sub = tuple(b for b in blocks if r.random() < 0.5)
    dbl = tuple(b for b in blocks if r.random() < 0.4)
    return NetworkConfig(
        input_length=int(r.integers(6, 17)), kernel_width=int(r.integers(1, 6)),
        initial_filters=int(r.integers(1, 4)), n_res_blocks=n_blocks,
        subsample_blocks=sub, filter_double_blocks=dbl,
        dropout_rate=float(r.choice([0.0, 0.3, 0.55])), dtype="float64",
    )


def max_relative_error(config: NetworkConfig, seed: int, batch: int = 3, step: float = 1e-5,
                       floor: float = 1e-6) -> float:
    """Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over all parameters."""
    r = np.random.default_rng(seed)
    net = Network(config, seed=seed)
    x = r.normal(size=(batch, config.input_length, 1))
    y = r.integers(0, config.n_classes, size=batch)
    net.train()
    logits = net.forward(x, rng=r)
    masks = dict(net.last_masks)
    _, dlogits = softmax_cross_entropy(logits, y)
    grads = net.backward(dlogits)

    def loss():
        return softmax_cross_entropy(net.forward(x, masks=masks), y)[0]

    worst = 0.0
    for name, p in net.params.items():
        g = grads[name]
        for i in range(p.size):
            old = p.flat[i]
            p.flat[i] = old + step
            up = loss()
            p.flat[i] = old - step
            down = loss()
            p.flat[i] = old
            num = (up - down) / (2 * step)
            err = abs(num - g.flat[i]) / max(abs(num), abs(g.flat[i]), floor)
            worst = max(worst, err)
    return worst
