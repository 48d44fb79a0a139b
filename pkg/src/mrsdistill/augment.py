"""Mixing augmentation of distilled samples, and a Gaussian-noise baseline.

A synthetic sample is ``(1 - alpha) * target + alpha * partner`` and keeps the
target's label. Every member of the distilled set serves as target exactly
``factor`` times; partners are drawn with replacement from a strategy-specific
pool that never contains the target itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .spectra import UNKNOWN_LABEL, Dataset, Spectrum

STRATEGIES = ("same", "other", "both", "noise")


@dataclass
class AugmentConfig:
    strategy: str = "both"
    alpha: float = 0.5
    factor: int = 5
    # noise strategy only; None -> 5% of the per-coordinate std of the source set
    noise_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown augmentation strategy {self.strategy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.factor < 0:
            raise ConfigError(f"factor must be >= 0, got {self.factor}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")


def mix(target: np.ndarray, partner: np.ndarray, alpha) -> np.ndarray:
    return (1.0 - alpha) * target + alpha * partner


def mix_samples(target: Spectrum, partner: Spectrum, alpha: float) -> Spectrum:
    if target.values.shape != partner.values.shape:
        raise ShapeError(f"cannot mix spectra of shapes {target.values.shape} and "
                         f"{partner.values.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return Spectrum(
        values=mix(target.values, partner.values, alpha),
        patient_id=target.patient_id,
        label=target.label,
        true_label=UNKNOWN_LABEL,
        synthetic=True,
    )


def target_schedule(n: int, factor: int) -> np.ndarray:
    """Target index per emission: ``0..n-1`` repeated ``factor`` times."""
    return np.tile(np.arange(n), factor)


def draw_partners(labels: np.ndarray, targets: np.ndarray, strategy: str,
                  rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn partner index per target, excluding the target itself."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    pools = {c: np.flatnonzero(labels == c) for c in (0, 1)}
    # position of each sample inside its own class pool
    pos_in_class = np.empty(n, dtype=np.int64)
    for c, pool in pools.items():
        pos_in_class[pool] = np.arange(len(pool))

    partners = np.empty(len(targets), dtype=np.int64)
    if strategy == "both":
        if n < 2:
            raise ConfigError("strategy 'both' needs at least two distilled samples")
        r = rng.integers(0, n - 1, size=len(targets))
        partners[:] = r + (r >= targets)
        return partners

    for c in (0, 1):
        rows = np.flatnonzero(labels[targets] == c)
        if len(rows) == 0:
            continue
        if strategy == "same":
            pool = pools[c]
            if len(pool) < 2:
                raise ConfigError(f"strategy 'same': class {c} has no partner besides the target")
            r = rng.integers(0, len(pool) - 1, size=len(rows))
            r += r >= pos_in_class[targets[rows]]
        elif strategy == "other":
            pool = pools[1 - c]
            if len(pool) == 0:
                raise ConfigError(f"strategy 'other': no partners of class {1 - c} "
                                  f"for targets of class {c}")
            r = rng.integers(0, len(pool), size=len(rows))
        else:
            raise ConfigError(f"strategy {strategy!r} does not draw partners")
        partners[rows] = pool[r]
    return partners


@dataclass
class Augmented:
    """Synthetic samples plus provenance (indices into the source set)."""

    values: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    partners: np.ndarray | None

    def __len__(self) -> int:
        return len(self.values)

    def to_dataset(self, source: Dataset, name: str = "augmented") -> Dataset | None:
        if len(self) == 0:
            return None
        return Dataset(
            values=self.values,
            labels=self.labels,
            true_labels=np.full(len(self), UNKNOWN_LABEL),
            patient_ids=source.patient_ids[self.targets],
            synthetic=np.ones(len(self), dtype=bool),
            name=name,
        )


def _source_arrays(certain) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(certain, Dataset):
        return certain.values, certain.labels
    if len(certain) == 0:
        raise ConfigError("augmentation needs a nonempty distilled set")
    return (np.stack([s.values for s in certain]),
            np.array([s.label for s in certain], dtype=np.int64))


def augment_arrays(values: np.ndarray, labels: np.ndarray, config: AugmentConfig) -> Augmented:
    n = len(values)
    if n == 0:
        raise ConfigError("augmentation needs a nonempty distilled set")
    rng = np.random.default_rng(config.seed)
    targets = target_schedule(n, config.factor)
    if config.factor == 0:
        empty = np.zeros((0, values.shape[1]))
        return Augmented(empty, np.zeros(0, dtype=np.int64), targets, np.zeros(0, dtype=np.int64))
    if config.strategy == "noise":
        sigma = default_noise_sigma(values) if config.noise_sigma is None else config.noise_sigma
        noisy = values[targets] + rng.standard_normal((len(targets), values.shape[1])) * sigma
        return Augmented(noisy, labels[targets], targets, None)
    partners = draw_partners(labels, targets, config.strategy, rng)
    mixed = mix(values[targets], values[partners], config.alpha)
    return Augmented(mixed, labels[targets], targets, partners)


def augment_set(certain: Sequence[Spectrum] | Dataset, config: AugmentConfig) -> list[Spectrum]:
    """The synthetic set: ``factor * len(certain)`` spectra (empty when factor is 0)."""
    values, labels = _source_arrays(certain)
    aug = augment_arrays(values, labels, config)
    pids = (certain.patient_ids if isinstance(certain, Dataset)
            else np.array([s.patient_id for s in certain], dtype=object))
    return [
        Spectrum(aug.values[i], pids[aug.targets[i]], int(aug.labels[i]), UNKNOWN_LABEL, True)
        for i in range(len(aug))
    ]


def default_noise_sigma(values: np.ndarray) -> np.ndarray:
    return 0.05 * np.std(values, axis=0)


def noise_augment(certain: Sequence[Spectrum] | Dataset, noise_sigma, factor: int,
                  seed: int) -> list[Spectrum]:
    """``factor`` noisy copies of every source spectrum (i.i.d. Gaussian, std ``noise_sigma``)."""
    if np.any(np.asarray(noise_sigma) < 0):
        raise ConfigError("noise_sigma must be nonnegative")
    cfg = AugmentConfig(strategy="noise", factor=factor, noise_sigma=None, seed=seed)
    values, labels = _source_arrays(certain)
    cfg.noise_sigma = noise_sigma  # may be a per-coordinate vector
    aug = augment_arrays(values, labels, cfg)
    pids = (certain.patient_ids if isinstance(certain, Dataset)
            else np.array([s.patient_id for s in certain], dtype=object))
    return [
        Spectrum(aug.values[i], pids[aug.targets[i]], int(aug.labels[i]), UNKNOWN_LABEL, True)
        for i in range(len(aug))
    ]
