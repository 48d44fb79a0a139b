"""Synthetic MR spectra: cohort generation, label noise, patient-wise splits,
minority oversampling and CSV serialization.

Spectra are 288-point real vectors on a chemical-shift axis running from
4.3 ppm (index 0) down to 0.5 ppm (index 287). Each spectrum is a sum of
Gaussian metabolite peaks, a random cubic baseline and white noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

N_POINTS = 288
PPM_START = 4.3
PPM_END = 0.5

HEALTHY = 0
TUMOR = 1
UNKNOWN_LABEL = -1


def ppm_axis(n_points: int = N_POINTS) -> np.ndarray:
    return np.linspace(PPM_START, PPM_END, n_points)


def ppm_to_index(ppm: float, n_points: int = N_POINTS) -> int:
    frac = (PPM_START - ppm) / (PPM_START - PPM_END)
    return int(round(frac * (n_points - 1)))


@dataclass(frozen=True)
class MetabolitePeak:
    name: str
    center_index: int
    width: float
    amplitude_range: tuple[float, float]

    def __post_init__(self):
        if not 0 <= self.center_index < N_POINTS:
            raise ConfigError(
                f"peak {self.name!r}: center_index {self.center_index} outside [0, {N_POINTS})"
            )
        if not self.width > 0:
            raise ConfigError(f"peak {self.name!r}: width must be positive, got {self.width}")
        lo, hi = self.amplitude_range
        if not lo <= hi:
            raise ConfigError(f"peak {self.name!r}: empty amplitude range [{lo}, {hi}]")
        object.__setattr__(self, "amplitude_range", (float(lo), float(hi)))

    def profile(self, amplitude: float, n_points: int = N_POINTS) -> np.ndarray:
        idx = np.arange(n_points, dtype=np.float64)
        return amplitude * np.exp(-0.5 * ((idx - self.center_index) / self.width) ** 2)


@dataclass(frozen=True)
class LabelNoiseSpec:
    """Label corruption model.

    ``selection`` decides which eligible spectra flip. ``uniform`` flips each
    independently with probability ``rate``. ``borderline`` (asymmetric mode
    only) flips a Binomial(n_healthy, rate) count of healthy spectra drawn
    without replacement with weight ``exp(score / temperature)``, where the
    score is the standardized projection onto the healthy-to-tumor mean
    direction: tissue at an unclear tumor border is the likeliest to be
    mislabeled.
    """

    mode: str = "none"  # none | asymmetric | symmetric
    rate: float = 0.0
    selection: str = "uniform"  # uniform | borderline
    temperature: float = 0.5

    def __post_init__(self):
        if self.mode not in ("none", "asymmetric", "symmetric"):
            raise ConfigError(f"unknown label-noise mode {self.mode!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"label-noise rate must lie in [0, 1], got {self.rate}")
        if self.selection not in ("uniform", "borderline"):
            raise ConfigError(f"unknown label-noise selection {self.selection!r}")
        if self.selection == "borderline" and self.mode != "asymmetric":
            raise ConfigError("borderline selection requires asymmetric mode")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class CohortConfig:
    n_patients: int
    voxels_per_patient_range: tuple[int, int]
    class_profiles: dict[int, list[MetabolitePeak]]
    baseline_distortion_amplitude: float = 0.0
    noise_sigma: float = 0.0
    label_noise: LabelNoiseSpec = field(default_factory=LabelNoiseSpec)
    seed: int = 0
    tumor_patient_fraction: float = 0.5
    # fraction of a peak's class amplitude range covered by one patient's voxels;
    # 1.0 removes the patient effect entirely
    patient_spread: float = 1.0

    def __post_init__(self):
        if self.n_patients < 2:
            raise ConfigError(f"n_patients must be >= 2, got {self.n_patients}")
        lo, hi = self.voxels_per_patient_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad voxels_per_patient_range {self.voxels_per_patient_range}")
        self.voxels_per_patient_range = (int(lo), int(hi))
        for cls in (HEALTHY, TUMOR):
            if not self.class_profiles.get(cls):
                raise ConfigError(f"class_profiles lacks a nonempty profile for class {cls}")
        if self.baseline_distortion_amplitude < 0 or self.noise_sigma < 0:
            raise ConfigError("baseline amplitude and noise sigma must be nonnegative")
        if not 0.0 < self.tumor_patient_fraction < 1.0:
            raise ConfigError("tumor_patient_fraction must lie in (0, 1)")
        if not 0.0 <= self.patient_spread <= 1.0:
            raise ConfigError("patient_spread must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_profiles"] = {
            str(cls): [asdict(p) for p in peaks] for cls, peaks in self.class_profiles.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        profiles = {}
        for key, peaks in d.pop("class_profiles").items():
            profiles[int(key)] = [_peak_from_dict(p) for p in peaks]
        noise = LabelNoiseSpec(**d.pop("label_noise", {}))
        d.pop("description", None)
        return cls(class_profiles=profiles, label_noise=noise, **d)


def _peak_from_dict(d: dict) -> MetabolitePeak:
    d = dict(d)
    if "center_ppm" in d:
        ppm = d.pop("center_ppm")
        d.setdefault("center_index", ppm_to_index(ppm))
    return MetabolitePeak(
        name=d["name"],
        center_index=int(d["center_index"]),
        width=float(d["width"]),
        amplitude_range=tuple(d["amplitude_range"]),
    )


def load_cohort_config(path: str | Path) -> CohortConfig:
    with open(path, encoding="utf-8") as fh:
        return CohortConfig.from_dict(json.load(fh))


def default_cohort_config(**overrides) -> CohortConfig:
    """The shipped cohort defaults (``data/default_cohort.json``), optionally overridden."""
    text = resources.files("mrsdistill.data").joinpath("default_cohort.json").read_text("utf-8")
    d = json.loads(text)
    if "label_noise" in overrides and isinstance(overrides["label_noise"], LabelNoiseSpec):
        overrides["label_noise"] = asdict(overrides["label_noise"])
    d.update(overrides)
    return CohortConfig.from_dict(d)


@dataclass
class Spectrum:
    values: np.ndarray
    patient_id: str
    label: int
    true_label: int
    synthetic: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_POINTS,):
            raise ConfigError(f"spectrum must have {N_POINTS} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("spectrum contains non-finite values")
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")
        allowed = (0, 1, UNKNOWN_LABEL) if self.synthetic else (0, 1)
        if self.true_label not in allowed:
            raise ConfigError(f"bad true_label {self.true_label}")


@dataclass(eq=False)
class Dataset:
    """Array-backed collection of labeled spectra, grouped by patient.

    Row ``i`` of every array describes spectrum ``i``. ``true_labels`` holds the
    generator's ground truth (``-1`` where unknown, e.g. synthetic samples).
    """

    values: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    patient_ids: np.ndarray
    synthetic: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        n = len(self.values)
        if n == 0:
            raise ConfigError(f"dataset {self.name!r} is empty")
        if self.values.ndim != 2:
            raise ConfigError(f"values must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError(f"dataset {self.name!r} contains non-finite values")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=object)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        self.synthetic = np.asarray(self.synthetic, dtype=bool)
        for arr, what in ((self.labels, "labels"), (self.true_labels, "true_labels"),
                          (self.patient_ids, "patient_ids"), (self.synthetic, "synthetic")):
            if arr.shape != (n,):
                raise ConfigError(f"{what} has shape {arr.shape}, expected ({n},)")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ConfigError("labels must be 0 or 1")
        if not np.all(np.isin(self.true_labels, (UNKNOWN_LABEL, 0, 1))):
            raise ConfigError("true_labels must be -1, 0 or 1")
        if any(not isinstance(p, str) or not p for p in self.patient_ids):
            raise ConfigError("patient ids must be nonempty strings")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, i: int) -> Spectrum:
        return Spectrum(
            values=self.values[i].copy(),
            patient_id=self.patient_ids[i],
            label=int(self.labels[i]),
            true_label=int(self.true_labels[i]),
            synthetic=bool(self.synthetic[i]),
        )

    def __iter__(self) -> Iterator[Spectrum]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.name == other.name
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.true_labels, other.true_labels)
            and list(self.patient_ids) == list(other.patient_ids)
            and np.array_equal(self.synthetic, other.synthetic)
        )

    @classmethod
    def from_spectra(cls, spectra: Sequence[Spectrum], name: str = "dataset") -> "Dataset":
        if not spectra:
            raise ConfigError(f"dataset {name!r} is empty")
        return cls(
            values=np.stack([s.values for s in spectra]),
            labels=[s.label for s in spectra],
            true_labels=[s.true_label for s in spectra],
            patient_ids=[s.patient_id for s in spectra],
            synthetic=[s.synthetic for s in spectra],
            name=name,
        )

    def subset(self, indices: Iterable[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices,
                         dtype=np.int64)
        return Dataset(
            values=self.values[idx],
            labels=self.labels[idx],
            true_labels=self.true_labels[idx],
            patient_ids=self.patient_ids[idx],
            synthetic=self.synthetic[idx],
            name=name or self.name,
        )

    def with_labels(self, labels: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.values, labels, self.true_labels, self.patient_ids,
                       self.synthetic, name or self.name)

    @staticmethod
    def concat(parts: Sequence["Dataset"], name: str = "dataset") -> "Dataset":
        return Dataset(
            values=np.concatenate([p.values for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            true_labels=np.concatenate([p.true_labels for p in parts]),
            patient_ids=np.concatenate([p.patient_ids for p in parts]),
            synthetic=np.concatenate([p.synthetic for p in parts]),
            name=name,
        )

    def patients(self) -> list[str]:
        """Distinct patient ids in order of first appearance."""
        return list(dict.fromkeys(self.patient_ids))

    def class_counts(self) -> tuple[int, int]:
        return int(np.sum(self.labels == 0)), int(np.sum(self.labels == 1))


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _baseline(amplitude: float, rng: np.random.Generator, n_points: int) -> np.ndarray:
    coeffs = rng.uniform(-1.0, 1.0, size=4)
    t = np.linspace(-1.0, 1.0, n_points)
    return amplitude * np.polynomial.polynomial.polyval(t, coeffs)


def generate_spectrum(
    cls: int,
    profile: Sequence[MetabolitePeak],
    baseline_amp: float,
    noise_sigma: float,
    rng: np.random.Generator,
    patient_id: str = "synthetic",
) -> Spectrum:
    """Draw one spectrum of class ``cls`` from a peak profile.

    Draw order (fixed for reproducibility): one amplitude per peak, four
    baseline coefficients, then ``N_POINTS`` noise samples.
    """
    if not profile:
        raise ConfigError("peak profile is empty")
    values = np.zeros(N_POINTS)
    for peak in profile:
        lo, hi = peak.amplitude_range
        values += peak.profile(rng.uniform(lo, hi) if hi > lo else lo)
    values += _baseline(baseline_amp, rng, N_POINTS)
    values += rng.normal(0.0, 1.0, size=N_POINTS) * noise_sigma
    return Spectrum(values=values, patient_id=patient_id, label=int(cls), true_label=int(cls))


def _patient_profile(profile: Sequence[MetabolitePeak], spread: float,
                     rng: np.random.Generator) -> list[MetabolitePeak]:
    if spread >= 1.0:
        return list(profile)
    out = []
    for peak in profile:
        lo, hi = peak.amplitude_range
        centre = rng.uniform(lo, hi)
        half = 0.5 * spread * (hi - lo)
        out.append(MetabolitePeak(peak.name, peak.center_index, peak.width,
                                  (max(lo, centre - half), min(hi, centre + half))))
    return out


def borderline_scores(values: np.ndarray, true_labels: np.ndarray) -> np.ndarray:
    """Standardized projection of each healthy spectrum onto the healthy-to-tumor direction."""
    healthy = true_labels == HEALTHY
    direction = values[~healthy].mean(axis=0) - values[healthy].mean(axis=0)
    proj = values[healthy] @ direction
    return (proj - proj.mean()) / (proj.std() + 1e-12)


def apply_label_noise(true_labels: np.ndarray, spec: LabelNoiseSpec,
                      rng: np.random.Generator, values: np.ndarray | None = None) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if spec.selection == "borderline":
        return _borderline_noise(true_labels, spec, rng, values)
    u = rng.random(len(true_labels))
    if spec.mode == "none" or spec.rate == 0.0:
        return true_labels.copy()
    flip = u < spec.rate
    if spec.mode == "asymmetric":
        flip &= true_labels == HEALTHY
    return np.where(flip, 1 - true_labels, true_labels)


def _borderline_noise(true_labels, spec, rng, values) -> np.ndarray:
    healthy = np.flatnonzero(true_labels == HEALTHY)
    k = int(rng.binomial(len(healthy), spec.rate))
    out = true_labels.copy()
    if k == 0:
        return out
    if values is None or len(healthy) == len(true_labels):
        raise ConfigError("borderline label noise needs spectra of both true classes")
    w = np.exp(borderline_scores(np.asarray(values, dtype=np.float64), true_labels)
               / spec.temperature)
    chosen = rng.choice(healthy, size=k, replace=False, p=w / w.sum())
    out[chosen] = 1 - out[chosen]
    return out


def generate_cohort(config: CohortConfig, name: str = "cohort") -> Dataset:
    """Generate a patient-grouped cohort; labels carry the configured noise."""
    rng = np.random.default_rng(config.seed)
    n = config.n_patients
    n_tumor = min(max(int(round(n * config.tumor_patient_fraction)), 1), n - 1)
    classes = np.array([TUMOR] * n_tumor + [HEALTHY] * (n - n_tumor))
    rng.shuffle(classes)

    values, true_labels, pids = [], [], []
    lo, hi = config.voxels_per_patient_range
    for p, cls in enumerate(classes):
        pid = f"P{p:04d}"
        n_vox = int(rng.integers(lo, hi + 1))
        profile = _patient_profile(config.class_profiles[int(cls)], config.patient_spread, rng)
        for _ in range(n_vox):
            s = generate_spectrum(int(cls), profile, config.baseline_distortion_amplitude,
                                  config.noise_sigma, rng, patient_id=pid)
            values.append(s.values)
            true_labels.append(int(cls))
            pids.append(pid)

    # separate stream so the spectra do not depend on the noise settings
    noise_rng = np.random.default_rng([config.seed, 0x4C4E])
    values = np.stack(values)
    labels = apply_label_noise(np.array(true_labels), config.label_noise, noise_rng, values)
    return Dataset(values, labels, true_labels, pids, name=name)


# --------------------------------------------------------------------------
# splitting and rebalancing
# --------------------------------------------------------------------------


def split_leave_subjects_out(
    dataset: Dataset, k: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition patients into ``k`` near-equal groups; fold ``i`` tests on group ``i``."""
    patients = dataset.patients()
    if k < 2:
        raise ConfigError(f"k must be >= 2 for cross-validation, got {k}")
    if len(patients) < k:
        raise ConfigError(f"{len(patients)} patients cannot fill {k} folds")
    order = rng.permutation(len(patients))
    groups = np.array_split(order, k)
    folds = []
    for group in groups:
        test_patients = {patients[i] for i in group}
        is_test = np.array([p in test_patients for p in dataset.patient_ids])
        folds.append((np.flatnonzero(~is_test), np.flatnonzero(is_test)))
    return folds


def split_patients(dataset: Dataset, fraction: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Hold out roughly ``fraction`` of the patients, stratified by majority label.

    Returns (keep_indices, holdout_indices). At least one patient of each
    patient-class is held out when both classes have two or more patients.
    """
    patients = dataset.patients()
    pid_index = {p: i for i, p in enumerate(patients)}
    rows = np.array([pid_index[p] for p in dataset.patient_ids])
    tumor_share = np.bincount(rows, weights=dataset.labels, minlength=len(patients))
    tumor_share /= np.bincount(rows, minlength=len(patients))
    patient_cls = (tumor_share >= 0.5).astype(int)

    held = []
    for cls in (0, 1):
        members = np.flatnonzero(patient_cls == cls)
        if len(members) < 2:
            continue
        n_hold = max(1, int(round(fraction * len(members))))
        held.extend(rng.choice(members, size=n_hold, replace=False).tolist())
    mask = np.isin(rows, held)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def smote_point(base: np.ndarray, neighbour: np.ndarray, gap: float) -> np.ndarray:
    return base + gap * (neighbour - base)


def oversample_minority(train: Dataset, rng: np.random.Generator,
                        k_neighbors: int = 5) -> Dataset:
    """Balance the two label classes by SMOTE interpolation within the minority class.

    Synthetic rows are appended after the originals, flagged ``synthetic`` with
    ``true_label = -1``, and inherit the patient id of their base sample.
    """
    n0, n1 = train.class_counts()
    if n0 == 0 or n1 == 0:
        raise ConfigError("oversampling needs both classes present")
    if n0 == n1:
        return train
    minority = 0 if n0 < n1 else 1
    need = abs(n1 - n0)
    idx = np.flatnonzero(train.labels == minority)
    pts = train.values[idx]

    if len(idx) == 1:
        log.warning("minority class has a single sample; oversampling by duplication")
        base = np.zeros(need, dtype=np.int64)
        new_values = np.repeat(pts, need, axis=0)
    else:
        kk = min(k_neighbors, len(idx) - 1)
        sq = np.sum(pts**2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T
        np.fill_diagonal(d2, np.inf)
        neighbours = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        base = rng.integers(0, len(idx), size=need)
        pick = neighbours[base, rng.integers(0, kk, size=need)]
        gaps = rng.random(need)
        new_values = smote_point(pts[base], pts[pick], gaps[:, None])

    extra = Dataset(
        values=new_values,
        labels=np.full(need, minority),
        true_labels=np.full(need, UNKNOWN_LABEL),
        patient_ids=train.patient_ids[idx[base]],
        synthetic=np.ones(need, dtype=bool),
        name=train.name,
    )
    return Dataset.concat([train, extra], name=train.name)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``patient_id,label,true_label[,synthetic],v0..v{n-1}`` rows.

    The ``synthetic`` column is written only when some row is synthetic.
    Floats use ``repr`` so that loading is bit-exact.
    """
    with_flag = bool(np.any(dataset.synthetic))
    header = ["patient_id", "label", "true_label"]
    if with_flag:
        header.append("synthetic")
    header += [f"v{i}" for i in range(dataset.n_points)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [dataset.patient_ids[i], int(dataset.labels[i]), int(dataset.true_labels[i])]
            if with_flag:
                row.append(int(dataset.synthetic[i]))
            row += [repr(float(v)) for v in dataset.values[i]]
            w.writerow(row)


def load_dataset(path: str | Path, name: str | None = None) -> Dataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: no records")
        if header[:3] != ["patient_id", "label", "true_label"]:
            raise ParseError(f"unexpected header {header[:4]}", line=1)
        with_flag = len(header) > 3 and header[3] == "synthetic"
        n_meta = 4 if with_flag else 3
        n_points = len(header) - n_meta
        if n_points != N_POINTS:
            raise ParseError(f"header declares {n_points} values, expected {N_POINTS}", line=1)

        values, labels, true_labels, pids, synth = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields ({N_POINTS} values), got {len(row)}",
                    line=lineno)
            try:
                vals = np.array([float(v) for v in row[n_meta:]])
                label, true_label = int(row[1]), int(row[2])
                flag = bool(int(row[3])) if with_flag else False
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", line=lineno)
            if label not in (0, 1) or true_label not in (UNKNOWN_LABEL, 0, 1):
                raise ParseError(f"bad label pair ({label}, {true_label})", line=lineno)
            if not row[0]:
                raise ParseError("empty patient_id", line=lineno)
            values.append(vals)
            labels.append(label)
            true_labels.append(true_label)
            pids.append(row[0])
            synth.append(flag)
    if not values:
        raise ParseError(f"{path}: no records")
    return Dataset(np.stack(values), labels, true_labels, pids, synth,
                   name=name or path.stem)


def clean_fraction(dataset: Dataset, indices: Iterable[int] | None = None) -> float:
    """Share of rows (with known ground truth) whose label equals the true label."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(list(indices), dtype=int)
    if len(idx) == 0:
        return math.nan
    known = dataset.true_labels[idx] >= 0
    if not np.any(known):
        return math.nan
    sel = idx[known]
    return float(np.mean(dataset.labels[sel] == dataset.true_labels[sel]))
