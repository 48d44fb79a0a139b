"""Confidence-threshold data distillation.

A fresh network is trained on the (noisy) training set; after every one of
the first ``max_epoch`` epochs the whole set is swept in eval mode and every
sample whose top class probability reaches ``theta`` joins the certain set.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError
from .nn import Network, NetworkConfig, TrainConfig, predict_proba, save_checkpoint
from .nn.training import Trainer
from .rng import derive_seed
from .spectra import Dataset

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    theta: float = 0.99
    max_epoch: int = 5
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.5 < self.theta <= 1.0:
            raise ConfigError(f"theta must lie in (0.5, 1], got {self.theta}")
        if self.max_epoch < 1:
            raise ConfigError(f"max_epoch must be >= 1, got {self.max_epoch}")

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        net = NetworkConfig.from_dict(d.pop("network", {}))
        tr = TrainConfig.from_dict(d.pop("train", {}))
        return cls(network=net, train=tr, **d)


def certain_from_probs(probs: np.ndarray, theta: float) -> np.ndarray:
    """Indices whose maximum class probability is at least ``theta``."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.flatnonzero(probs.max(axis=1) >= theta)


def collect_certain(model: Network, dataset: Dataset, theta: float,
                    indices: Iterable[int] | None = None) -> np.ndarray:
    """Sorted dataset indices the model is certain about; labels are never consulted.

    ``indices`` restricts the sweep to a subset (the result still uses
    dataset-level indices).
    """
    if indices is None:
        return certain_from_probs(predict_proba(model, dataset.values), theta)
    idx = np.asarray(list(indices), dtype=np.int64)
    if len(idx) == 0:
        return idx
    return idx[certain_from_probs(predict_proba(model, dataset.values[idx]), theta)]


@dataclass
class CertainSet:
    member_indices: list[int]
    first_certain_epoch: dict[int, int]
    per_epoch_counts: list[int]
    per_epoch_members: list[list[int]] = field(default_factory=list)

    @property
    def cumulative_counts(self) -> list[int]:
        seen: set[int] = set()
        out = []
        for members in self.per_epoch_members:
            seen.update(members)
            out.append(len(seen))
        return out

    def up_to_epoch(self, epoch: int) -> "CertainSet":
        """The certain set a run stopped after ``epoch`` epochs would have produced."""
        if not 1 <= epoch <= len(self.per_epoch_members):
            raise ConfigError(f"epoch {epoch} outside 1..{len(self.per_epoch_members)}")
        first = {i: e for i, e in self.first_certain_epoch.items() if e <= epoch}
        return CertainSet(sorted(first), first, self.per_epoch_counts[:epoch],
                          self.per_epoch_members[:epoch])

    def to_dict(self) -> dict:
        return {
            "member_indices": self.member_indices,
            "first_certain_epoch": {str(k): v for k, v in sorted(self.first_certain_epoch.items())},
            "per_epoch_counts": self.per_epoch_counts,
            "cumulative_counts": self.cumulative_counts,
            "per_epoch_members": self.per_epoch_members,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CertainSet":
        return cls(
            member_indices=[int(i) for i in d["member_indices"]],
            first_certain_epoch={int(k): int(v) for k, v in d["first_certain_epoch"].items()},
            per_epoch_counts=[int(c) for c in d["per_epoch_counts"]],
            per_epoch_members=[[int(i) for i in m] for m in d.get("per_epoch_members", [])],
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "CertainSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class DistillResult:
    certain: CertainSet
    network: Network
    log: list[dict]


def run_distillation(dataset: Dataset, config: DistillConfig, seed: int,
                     eligible: Iterable[int] | None = None,
                     checkpoint_dir: str | Path | None = None) -> DistillResult:
    """Train a distillation network and collect certain samples after each epoch.

    ``eligible`` limits which indices may enter the certain set (the network
    still trains on the whole dataset). With ``checkpoint_dir``, the network
    state after each epoch is written as ``epoch_XX.npz``.
    """
    if len(dataset) == 0:
        raise ConfigError("distillation needs a nonempty dataset")
    net = Network(config.network, seed=derive_seed(seed, "distill-net"))
    tcfg = TrainConfig(**{**asdict(config.train), "seed": derive_seed(seed, "distill-train")})
    trainer = Trainer(net, dataset, tcfg)
    eligible_idx = None if eligible is None else np.asarray(sorted(set(eligible)), dtype=np.int64)

    first: dict[int, int] = {}
    per_epoch_members: list[list[int]] = []
    history = []
    for epoch in range(1, config.max_epoch + 1):
        loss = trainer.run_epoch()
        members = collect_certain(net, dataset, config.theta, eligible_idx).tolist()
        per_epoch_members.append(members)
        for i in members:
            first.setdefault(i, epoch)
        history.append({"epoch": epoch, "train_loss": loss, "n_certain_epoch": len(members),
                        "n_certain_total": len(first)})
        log.info("distill epoch %d: loss %.4f, |C_E| = %d, |C| = %d",
                 epoch, loss, len(members), len(first))
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch:02d}.npz", net,
                            epoch_log=history)

    certain = CertainSet(
        member_indices=sorted(first),
        first_certain_epoch=first,
        per_epoch_counts=[len(m) for m in per_epoch_members],
        per_epoch_members=per_epoch_members,
    )
    return DistillResult(certain, net, history)


# --------------------------------------------------------------------------
# distance-shift analysis
# --------------------------------------------------------------------------


@dataclass
class ClassDistances:
    label: int
    bin_edges: list[float]
    full_counts: list[int]
    distilled_counts: list[int]
    full_median: float
    distilled_median: float
    distilled_empty: bool


@dataclass
class DistanceShiftReport:
    classes: list[ClassDistances]

    def to_dict(self) -> dict:
        return {"classes": [asdict(c) for c in self.classes]}

    def medians(self) -> dict[int, tuple[float, float]]:
        return {c.label: (c.full_median, c.distilled_median) for c in self.classes}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "set", "bin_left", "bin_right", "count", "median"])
            for c in self.classes:
                for which, counts, med in (("full", c.full_counts, c.full_median),
                                           ("distilled", c.distilled_counts, c.distilled_median)):
                    for i, n in enumerate(counts):
                        w.writerow([c.label, which, repr(c.bin_edges[i]),
                                    repr(c.bin_edges[i + 1]), n, repr(med)])


def opposite_centroid_distances(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Euclidean distance of each row to the centroid of the other labeled class."""
    centroids = {c: values[labels == c].mean(axis=0) for c in (0, 1)}
    out = np.empty(len(values))
    for c in (0, 1):
        rows = labels == c
        out[rows] = np.linalg.norm(values[rows] - centroids[1 - c], axis=1)
    return out


def distance_shift_report(dataset: Dataset, certain_indices: Iterable[int],
                          bins: int = 30) -> DistanceShiftReport:
    """Histograms of distance to the opposite-class centroid, full vs. distilled.

    Centroids are computed on the full dataset by label; bin edges are shared
    between the two sets of each class.
    """
    labels = dataset.labels
    if len(set(labels.tolist())) < 2:
        raise ConfigError("distance report needs both classes in the full set")
    dist = opposite_centroid_distances(dataset.values, labels)
    members = np.zeros(len(dataset), dtype=bool)
    members[np.asarray(list(certain_indices), dtype=np.int64)] = True
    classes = []
    for c in (0, 1):
        full = dist[labels == c]
        sub = dist[(labels == c) & members]
        edges = np.histogram_bin_edges(full, bins=bins)
        empty = len(sub) == 0
        if empty:
            log.warning("distilled set has no samples labeled %d", c)
        classes.append(ClassDistances(
            label=c,
            bin_edges=edges.tolist(),
            full_counts=np.histogram(full, edges)[0].tolist(),
            distilled_counts=np.histogram(sub, edges)[0].tolist(),
            full_median=float(np.median(full)),
            distilled_median=float(np.median(sub)) if not empty else float("nan"),
            distilled_empty=empty,
        ))
    return DistanceShiftReport(classes)
