"""Dataset and model introspection: k-means with an elbow scan, class/cluster
cross-tabulation, cluster mean spectra and class activation maps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn import Network
from .spectra import Spectrum

log = logging.getLogger(__name__)

# relative slack for the per-iteration inertia check (floating-point reassociation)
_INERTIA_RTOL = 1e-9


@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    history: list[float]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignments": self.assignments.tolist(),
            "inertia": self.inertia,
            "iterations": self.iterations,
            "inertia_history": self.history,
        }

    def save(self, json_path: str | Path, centroid_csv: str | Path | None = None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        if centroid_csv is not None:
            with open(centroid_csv, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["cluster"] + [f"v{i}" for i in range(self.centroids.shape[1])])
                for c, row in enumerate(self.centroids):
                    w.writerow([c] + [repr(float(v)) for v in row])


def _as_matrix(data) -> np.ndarray:
    if hasattr(data, "values") and not isinstance(data, np.ndarray):
        data = data.values
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D data matrix, got shape {x.shape}")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x**2, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def inertia_of(x: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum((x - centroids[assignments]) ** 2))


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centres = [x[rng.integers(n)]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centres.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centres)


def kmeans(data, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10) -> ClusterResult:
    """Lloyd's algorithm from a k-means++ start, finished by Hartigan transfers.

    Lloyd stops at an assignment fixpoint, when no centroid moves more than ``tol``,
    or after ``max_iter`` iterations. The inertia is checked to be
    non-increasing after every iteration.
    """
    x = _as_matrix(data)
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if k > len(np.unique(x, axis=0)):
        raise ConfigError(f"k={k} exceeds the number of distinct points")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, k, rng)
    assign = np.argmin(_sq_dists(x, centroids), axis=1)
    history = [inertia_of(x, assign, centroids)]
    it = 0
    for it in range(1, max_iter + 1):
        new_c = centroids.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new_c[c] = x[members].mean(axis=0)
        empty = [c for c in range(k) if not np.any(assign == c)]
        for c in empty:
            far = int(np.argmax(np.sum((x - new_c[assign]) ** 2, axis=1)))
            log.info("k-means: cluster %d empty, re-seeding at point %d", c, far)
            new_c[c] = x[far]
            assign[far] = c
        new_assign = np.argmin(_sq_dists(x, new_c), axis=1)
        inertia = inertia_of(x, new_assign, new_c)
        if inertia > history[-1] * (1 + _INERTIA_RTOL) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        shift = float(np.max(np.linalg.norm(new_c - centroids, axis=1)))
        fixpoint = np.array_equal(new_assign, assign)
        centroids, assign = new_c, new_assign
        if fixpoint or shift < tol:
            break
    # final centroids are the means of the final assignment
    for c in range(k):
        members = assign == c
        if members.any():
            centroids[c] = x[members].mean(axis=0)
    hartigan_refine(x, assign, centroids)
    inertia = inertia_of(x, assign, centroids)
    if inertia > history[-1] * (1 + _INERTIA_RTOL) + 1e-12:
        raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
    history.append(inertia)
    return ClusterResult(k, assign, centroids, inertia, it, history)


def hartigan_refine(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray,
                    max_sweeps: int = 100) -> int:
    """Single-point transfers that strictly lower the inertia, applied in place.

    Lloyd fixpoints can still admit such a move, since moving a point also
    shifts both centroids. Returns the number of transfers made.
    """
    counts = np.bincount(assign, minlength=len(centroids)).astype(float)
    moves = 0
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(x)):
            a = assign[i]
            if counts[a] <= 1:
                continue
            d = np.sum((centroids - x[i]) ** 2, axis=1)
            cost_out = counts[a] / (counts[a] - 1) * d[a]
            cost_in = counts / (counts + 1) * d
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < cost_out * (1 - 1e-12):
                centroids[a] = (centroids[a] * counts[a] - x[i]) / (counts[a] - 1)
                centroids[b] = (centroids[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                assign[i] = b
                moved = True
                moves += 1
        if not moved:
            break
    # recompute exactly to drop incremental rounding
    for c in range(len(centroids)):
        centroids[c] = x[assign == c].mean(axis=0)
    return moves


@dataclass
class ElbowScan:
    ks: list[int]
    raw: list[float]
    monotone: list[float]

    def rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.ks, self.raw, self.monotone))


def elbow_scan(data, k_range: Sequence[int], seed: int = 0, restarts: int = 10) -> ElbowScan:
    """Best-of-``restarts`` inertia per k, plus its running minimum over increasing k."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ConfigError("k_range is empty")
    x = _as_matrix(data)
    raw = []
    for k in ks:
        seeds = np.random.SeedSequence([seed, k]).generate_state(restarts)
        raw.append(min(kmeans(x, k, seed=int(s)).inertia for s in seeds))
    return ElbowScan(ks, raw, np.minimum.accumulate(raw).tolist())


def crosstab(assignments, labels, k: int | None = None) -> np.ndarray:
    """Matrix ``[k, 2]``: percentage of each class's spectra falling in each cluster.

    A class with no members gets a column of NaN.
    """
    a = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if a.shape != y.shape:
        raise ConfigError("assignments and labels must have equal length")
    k = int(a.max()) + 1 if k is None else k
    table = np.full((k, 2), np.nan)
    for c in (0, 1):
        members = y == c
        if members.any():
            table[:, c] = 100.0 * np.bincount(a[members], minlength=k) / members.sum()
    return table


def write_crosstab_csv(table: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "healthy_pct", "tumor_pct"])
        for c, row in enumerate(table):
            w.writerow([c] + ["" if np.isnan(v) else f"{v:.6f}" for v in row])


def cluster_profiles(data, result: ClusterResult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cluster mean spectrum, per-coordinate std (population) and size."""
    x = _as_matrix(data)
    means = np.full((result.k, x.shape[1]), np.nan)
    stds = np.full((result.k, x.shape[1]), np.nan)
    sizes = np.bincount(result.assignments, minlength=result.k)
    for c in range(result.k):
        members = x[result.assignments == c]
        if len(members):
            means[c] = members.mean(axis=0)
            stds[c] = members.std(axis=0)
    return means, stds, sizes


# --------------------------------------------------------------------------
# class activation maps
# --------------------------------------------------------------------------


@dataclass
class Cam:
    class_index: int
    raw: np.ndarray
    upsampled: np.ndarray
    logit: float
    bias: float


def upsample(raw: np.ndarray, length: int, method: str = "nearest") -> np.ndarray:
    """Stretch a CAM to ``length`` samples; ``nearest`` repeats each position."""
    n = len(raw)
    if method == "nearest":
        src = (np.arange(length) * n) // length
        return raw[src]
    if method == "linear":
        centres = (np.arange(n) + 0.5) * length / n - 0.5
        return np.interp(np.arange(length), centres, raw)
    raise ConfigError(f"unknown upsampling method {method!r}")


def class_activation_map(net: Network, spectrum: Spectrum | np.ndarray, class_index: int,
                         method: str = "nearest") -> Cam:
    """Dense-weighted sum over channels of the final feature map, per position."""
    if not 0 <= class_index < net.config.n_classes:
        raise ConfigError(f"class index {class_index} outside 0..{net.config.n_classes - 1}")
    values = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
    feats = net.features(values[None, :]).astype(np.float64)[0]  # [length, channels]
    w = net.params["dense.weight"].astype(np.float64)[class_index]
    b = float(net.params["dense.bias"][class_index])
    raw = feats @ w
    logit = float(feats.mean(axis=0) @ w + b)
    return Cam(class_index, raw, upsample(raw, net.config.input_length, method), logit, b)


def write_cam_csv(path: str | Path, spectrum_values: np.ndarray, cams: Sequence[Cam]) -> None:
    n_raw = len(cams[0].raw) if cams else 0
    length = len(spectrum_values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["position", "spectrum"]
        for c in cams:
            header += [f"raw_class{c.class_index}", f"upsampled_class{c.class_index}"]
        w.writerow(header)
        for i in range(length):
            src = (i * n_raw) // length if n_raw else 0
            row = [i, repr(float(spectrum_values[i]))]
            for c in cams:
                row += [repr(float(c.raw[src])), repr(float(c.upsampled[i]))]
            w.writerow(row)
