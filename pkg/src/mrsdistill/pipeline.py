"""End-to-end experiments: patient-wise cross-validation of
distill -> augment -> train -> evaluate, with parameter sweeps.

A run directory holds one subdirectory per (fold, seed) cell. Each cell runs
the distillation network once (up to the largest ``max_epoch`` any arm
needs) and derives every arm's distilled set from its per-epoch record, so
all arms and sweep points of a cell share the same split, oversampled
training set and distillation trajectory.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .augment import AugmentConfig, augment_arrays
from .distill import DistillConfig, distance_shift_report, run_distillation
from .errors import ConfigError
from .evaluation import (CvSummary, EvalReport, evaluate, patient_labels_from,
                         summarize_cv, write_report_json, write_roc_csv)
from .nn import Network, NetworkConfig, TrainConfig, predict_proba, save_checkpoint, train
from .rng import derive_seed, make_rng
from .spectra import (CohortConfig, Dataset, clean_fraction, generate_cohort, load_cohort_config,
                      load_dataset, oversample_minority, split_leave_subjects_out, split_patients)

log = logging.getLogger(__name__)

ARMS = ("none", "distill", "same", "other", "both", "noise")
SWEEP_AXES = ("alpha", "factor", "max_epoch", "strategy")
DEFAULT_GRIDS = {
    "alpha": [round(0.05 + 0.1 * i, 2) for i in range(10)],
    "factor": [0, 1, 2, 3, 4, 5, 6, 8, 10],
    "max_epoch": list(range(1, 11)),
    "strategy": ["same", "other", "both"],
}


@dataclass
class ExperimentConfig:
    cohort: CohortConfig | str
    folds: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1])
    split_seed: int = 0
    # arms: "none" = plain network on the full (oversampled) training set,
    # "distill" = distilled set only, else an augmentation strategy
    arms: list[str] = field(default_factory=lambda: ["none", "both"])
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    theta: float = 0.99
    max_epoch: int = 5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    validation_fraction: float = 0.1
    oversample: bool = True
    logistic_baseline: bool = False
    save_checkpoints: bool = True
    fold_subset: list[int] | None = None
    sweep: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        for arm in self.arms:
            if arm not in ARMS:
                raise ConfigError(f"unknown arm {arm!r}; expected one of {ARMS}")
        for axis in self.sweep:
            if axis not in SWEEP_AXES:
                raise ConfigError(f"sweep axis {axis!r} not in {SWEEP_AXES}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.fold_subset is not None:
            bad = [f for f in self.fold_subset if not 0 <= f < self.folds]
            if bad:
                raise ConfigError(f"fold_subset entries {bad} outside 0..{self.folds - 1}")
        DistillConfig(theta=self.theta, max_epoch=self.max_epoch)  # validates

    def distill_config(self, max_epoch: int | None = None) -> DistillConfig:
        return DistillConfig(theta=self.theta, max_epoch=max_epoch or self.max_epoch,
                             network=self.network, train=self.train)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.cohort, CohortConfig):
            d["cohort"] = self.cohort.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        cohort = d.pop("cohort")
        if isinstance(cohort, dict):
            cohort = CohortConfig.from_dict(cohort)
        elif base_dir is not None and not Path(cohort).is_absolute():
            cohort = str(Path(base_dir) / cohort)
        return cls(
            cohort=cohort,
            network=NetworkConfig.from_dict(d.pop("network", {})),
            train=TrainConfig.from_dict(d.pop("train", {})),
            augment=AugmentConfig(**d.pop("augment", {})),
            **d,
        )

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh), base_dir=path.parent)


def load_cohort(cohort: CohortConfig | str) -> Dataset:
    if isinstance(cohort, CohortConfig):
        return generate_cohort(cohort)
    path = Path(cohort)
    if path.suffix == ".json":
        return generate_cohort(load_cohort_config(path))
    return load_dataset(path)


@dataclass(frozen=True)
class Point:
    """One trained model per cell: an arm plus its augmentation parameters."""

    arm: str
    alpha: float | None = None
    factor: int | None = None
    max_epoch: int | None = None

    @property
    def key(self) -> str:
        if self.arm == "none":
            return "none"
        if self.arm == "logistic":
            return "logistic"
        if self.arm == "distill":
            return f"distill_E{self.max_epoch}"
        if self.arm == "noise":
            return f"noise_f{self.factor}_E{self.max_epoch}"
        return f"{self.arm}_a{self.alpha:g}_f{self.factor}_E{self.max_epoch}"

    def axes(self) -> dict:
        return {"strategy": self.arm, "alpha": self.alpha, "factor": self.factor,
                "max_epoch": self.max_epoch}


def default_point(config: ExperimentConfig, arm: str) -> Point:
    if arm in ("none", "logistic"):
        return Point(arm)
    if arm == "distill":
        return Point(arm, max_epoch=config.max_epoch)
    if arm == "noise":
        return Point(arm, None, config.augment.factor, config.max_epoch)
    return Point(arm, config.augment.alpha, config.augment.factor, config.max_epoch)


def sweep_points(config: ExperimentConfig, axes: dict[str, list]) -> list[Point]:
    arms = list(axes.get("strategy", config.arms))
    alphas = axes.get("alpha", [config.augment.alpha])
    factors = axes.get("factor", [config.augment.factor])
    epochs = axes.get("max_epoch", [config.max_epoch])
    points: list[Point] = []
    for arm in arms:
        if arm == "none":
            points.append(Point("none"))
        elif arm == "distill":
            points.extend(Point("distill", max_epoch=int(e)) for e in epochs)
        else:
            for a, f, e in itertools.product(alphas, factors, epochs):
                points.append(Point(arm, None if arm == "noise" else float(a), int(f), int(e)))
    return list(dict.fromkeys(points))


# --------------------------------------------------------------------------
# logistic-regression comparator
# --------------------------------------------------------------------------


def baseline_logistic(train_set: Dataset, test_set: Dataset, seed: int = 0, l2: float = 1e-2,
                      learning_rate: float = 0.5, iterations: int = 500) -> EvalReport:
    """L2-regularized logistic regression on standardized raw spectra, full-batch gradient descent."""
    mu = train_set.values.mean(axis=0)
    sd = train_set.values.std(axis=0) + 1e-12
    x = (train_set.values - mu) / sd
    y = train_set.labels.astype(np.float64)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 1e-3, size=x.shape[1])
    b = 0.0
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        err = p - y
        w -= learning_rate * (x.T @ err / len(y) + l2 * w)
        b -= learning_rate * float(np.mean(err))
    xt = (test_set.values - mu) / sd
    pt = 1.0 / (1.0 + np.exp(-(xt @ w + b)))
    probs = np.stack([1.0 - pt, pt], axis=1)
    return evaluate(probs, test_set.labels, test_set.patient_ids,
                    _patient_truth(test_set), true_labels=test_set.true_labels)


def _patient_truth(ds: Dataset) -> dict[str, int]:
    truth = np.where(ds.true_labels >= 0, ds.true_labels, ds.labels)
    return patient_labels_from(truth, ds.patient_ids)


# --------------------------------------------------------------------------
# one (fold, seed) cell
# --------------------------------------------------------------------------


def _write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _patients(ds: Dataset | None, idx=None) -> list[str]:
    if ds is None:
        return []
    pids = ds.patient_ids if idx is None else ds.patient_ids[np.asarray(idx, dtype=np.int64)]
    return sorted(set(pids.tolist()))


@dataclass
class CellTask:
    config: ExperimentConfig
    data: Dataset
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    points: list[Point]
    cell_dir: Path | None


def run_cell(task: CellTask) -> dict[str, dict]:
    """Train and evaluate every point of one cell; returns ``{point_key: report dict}``.

    A point that fails is logged and reported as ``{"error": message}``.
    """
    cfg, data, fold, seed = task.config, task.data, task.fold, task.seed
    out = task.cell_dir
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    train_full = data.subset(task.train_idx, name="train")
    test = data.subset(task.test_idx, name="test")
    keep, hold = split_patients(train_full, cfg.validation_fraction,
                                make_rng(seed, "validation", fold))
    train_real = train_full.subset(keep, name="train")
    valid = train_full.subset(hold, name="valid") if len(hold) else None
    if cfg.oversample:
        pool = oversample_minority(train_real, make_rng(seed, "oversample", fold))
    else:
        pool = train_real
    n_real = len(train_real)  # oversampling appends, so rows < n_real are real

    split_info = {
        "fold": fold, "seed": seed,
        "train_patients": _patients(train_real),
        "valid_patients": _patients(valid),
        "test_patients": _patients(test),
        "n_train_real": n_real, "n_train_pool": len(pool), "n_test": len(test),
        "train_clean_fraction": clean_fraction(train_real),
    }

    needs_distill = [p for p in task.points if p.arm not in ("none", "logistic")]
    certain = None
    if needs_distill:
        max_e = max(p.max_epoch for p in needs_distill)
        dres = run_distillation(pool, cfg.distill_config(max_e), derive_seed(seed, "distill", fold),
                                eligible=range(n_real))
        certain = dres.certain
        c_def = certain.up_to_epoch(min(cfg.max_epoch, max_e)).member_indices
        split_info["certain_clean_fraction"] = clean_fraction(train_real, c_def)
        split_info["certain_size"] = len(c_def)
        if out is not None:
            certain.save(out / "certain.json")
            _write_json(out / "distill_log.json", dres.log)
            try:
                report = distance_shift_report(train_real, c_def)
                report.write_csv(out / "distance_shift.csv")
                _write_json(out / "distance_shift.json", report.to_dict())
            except ConfigError as exc:
                log.warning("fold %d seed %d: no distance report: %s", fold, seed, exc)
    if out is not None:
        _write_json(out / "split.json", split_info)

    results: dict[str, dict] = {}
    for point in task.points:
        try:
            results[point.key] = _run_point(cfg, point, pool, n_real, train_real, valid, test,
                                            certain, fold, seed, out)
        except Exception as exc:  # isolate failures per point
            log.error("fold %d seed %d point %s failed: %s", fold, seed, point.key, exc)
            results[point.key] = {"error": f"{type(exc).__name__}: {exc}"}
    return results


def _primary_pool(cfg, point, pool, n_real, train_real, certain, fold, seed):
    """Training set for one point, plus provenance for the leakage audit."""
    prov: dict[str, list[str]] = {"distill_pool_patients": _patients(pool)}
    if point.arm == "none":
        return pool, prov
    members = np.asarray(certain.up_to_epoch(point.max_epoch).member_indices, dtype=np.int64)
    prov["certain_patients"] = _patients(pool, members)
    if len(members) == 0:
        raise ConfigError("distilled set is empty")
    c_set = pool.subset(members, name="certain")
    if point.arm == "distill" or point.factor == 0:
        return c_set, prov
    n0, n1 = c_set.class_counts()
    values, labels = c_set.values, c_set.labels
    if point.arm in ("same", "other") and (n0 == 0 or n1 == 0):
        # degenerate distilled set: borrow the missing class from the full training set
        missing = 0 if n0 == 0 else 1
        log.warning("fold %d seed %d: distilled set lacks class %d; using the full "
                    "training set for that class", fold, seed, missing)
        extra = train_real.subset(np.flatnonzero(train_real.labels == missing))
        c_set = Dataset.concat([c_set, extra], name="certain")
        values, labels = c_set.values, c_set.labels
    acfg = AugmentConfig(strategy=point.arm, alpha=0.0 if point.alpha is None else point.alpha, factor=point.factor,
                         noise_sigma=cfg.augment.noise_sigma,
                         seed=derive_seed(seed, "augment", fold, point.key))
    aug = augment_arrays(values, labels, acfg)
    aug_ds = aug.to_dataset(c_set)
    prov["augment_target_patients"] = _patients(c_set, aug.targets)
    if aug.partners is not None:
        prov["augment_partner_patients"] = _patients(c_set, aug.partners)
    return Dataset.concat([c_set, aug_ds], name="primary"), prov


def _run_point(cfg, point, pool, n_real, train_real, valid, test, certain, fold, seed, out):
    pdir = None
    if out is not None:
        pdir = out / point.key
        pdir.mkdir(exist_ok=True)
    if point.arm == "logistic":
        report = baseline_logistic(pool, test, seed=derive_seed(seed, "logistic", fold))
        prov = {"distill_pool_patients": _patients(pool)}
        train_log: list = []
    else:
        primary, prov = _primary_pool(cfg, point, pool, n_real, train_real, certain, fold, seed)
        prov["primary_pool_patients"] = _patients(primary)
        net = Network(cfg.network, seed=derive_seed(seed, "primary-net", fold))
        tcfg = TrainConfig(**{**asdict(cfg.train), "seed": derive_seed(seed, "primary-train", fold)})
        result = train(net, primary, valid, tcfg)
        train_log = result.log
        probs = predict_proba(net, test)
        report = evaluate(probs, test.labels, test.patient_ids, _patient_truth(test),
                          true_labels=test.true_labels)
        report.extras["primary_pool_size"] = len(primary)
        if result.best_epoch is not None:
            report.extras["best_epoch"] = result.best_epoch
        if pdir is not None and cfg.save_checkpoints:
            save_checkpoint(pdir / "checkpoint.npz", net, result.optimizer_state, train_log)
    prov["valid_patients"] = _patients(valid)
    if pdir is not None:
        write_report_json(report, pdir / "report.json")
        write_roc_csv(report, pdir / "roc.csv")
        _write_json(pdir / "provenance.json", prov)
        _write_json(pdir / "train_log.json", train_log)
    return report.to_dict()


# --------------------------------------------------------------------------
# experiments and sweeps
# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    run_dir: Path | None
    summaries: dict[str, CvSummary]
    points: list[Point]
    cells: dict[str, dict[str, dict]]

    def summary(self, arm_key: str) -> CvSummary:
        return self.summaries[arm_key]


def _cells(config: ExperimentConfig, data: Dataset):
    folds = split_leave_subjects_out(data, config.folds, np.random.default_rng(config.split_seed))
    fold_ids = config.fold_subset if config.fold_subset is not None else range(config.folds)
    for seed in config.seeds:
        for f in fold_ids:
            yield f, seed, folds[f]


def _execute(config: ExperimentConfig, points: list[Point], run_dir: Path | None,
             jobs: int = 1) -> ExperimentResult:
    data = load_cohort(config.cohort)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_json(run_dir / "config.json", config.to_dict())
    tasks = []
    for f, seed, (tr, te) in _cells(config, data):
        cell_dir = run_dir / "cells" / f"fold{f:02d}_seed{seed}" if run_dir is not None else None
        tasks.append(CellTask(config, data, f, tr, te, seed, points, cell_dir))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(run_cell, tasks))
    else:
        outputs = [run_cell(t) for t in tasks]

    cells = {f"fold{t.fold:02d}_seed{t.seed}": o for t, o in zip(tasks, outputs)}
    summaries = aggregate(cells, points)
    if run_dir is not None:
        write_summary(run_dir, summaries, points)
    return ExperimentResult(run_dir, summaries, points, cells)


def aggregate(cells: dict[str, dict[str, dict]], points: list[Point]) -> dict[str, CvSummary]:
    summaries = {}
    for p in points:
        reports, labels, missing = [], [], []
        for cell_key, res in cells.items():
            r = res.get(p.key)
            if r is None or "error" in r:
                missing.append(cell_key)
            else:
                reports.append(EvalReport.from_dict(r))
                labels.append(cell_key)
        if reports:
            summaries[p.key] = summarize_cv(reports, labels, missing)
    return summaries


def write_summary(run_dir: Path, summaries: dict[str, CvSummary], points: list[Point]) -> None:
    _write_json(run_dir / "summary.json", {k: s.to_dict() for k, s in summaries.items()})
    with open(run_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "alpha", "factor", "max_epoch", "n_runs", "n_missing",
                    "auc_mean", "auc_std", "sensitivity_mean", "specificity_mean",
                    "patient_accuracy_mean", "patient_accuracy_std"])
        for p in points:
            s = summaries.get(p.key)
            if s is None:
                continue
            ax = p.axes()
            w.writerow([ax["strategy"], "" if ax["alpha"] is None else ax["alpha"],
                        "" if ax["factor"] is None else ax["factor"],
                        "" if ax["max_epoch"] is None else ax["max_epoch"],
                        len(s.per_fold), len(s.missing),
                        f"{s.mean['auc']:.6f}", f"{s.std['auc']:.6f}",
                        f"{s.mean['sensitivity']:.6f}", f"{s.mean['specificity']:.6f}",
                        f"{s.mean['patient_accuracy']:.6f}", f"{s.std['patient_accuracy']:.6f}"])


def experiment_points(config: ExperimentConfig) -> list[Point]:
    points = [default_point(config, arm) for arm in config.arms]
    if config.logistic_baseline:
        points.append(Point("logistic"))
    return list(dict.fromkeys(points))


def run_experiment(config: ExperimentConfig, run_root: str | Path | None = None,
                   jobs: int = 1) -> ExperimentResult:
    """Cross-validate every configured arm at its default parameters.

    With ``run_root``, artifacts go to ``run_root/run-<config hash>/``.
    """
    run_dir = Path(run_root) / f"run-{config.hash()}" if run_root is not None else None
    return _execute(config, experiment_points(config), run_dir, jobs)


def run_sweep(config: ExperimentConfig, run_root: str | Path | None = None,
              axes: list[str] | None = None, jobs: int = 1) -> ExperimentResult:
    """Evaluate a grid over the sweep axes (all configured axes unless ``axes`` is given).

    Axes missing from ``config.sweep`` use the default grids. The plain
    network runs once per cell regardless of the grid.
    """
    names = axes if axes is not None else list(config.sweep)
    if not names:
        raise ConfigError("sweep grid is empty")
    grid = {}
    for name in names:
        if name not in SWEEP_AXES:
            raise ConfigError(f"sweep axis {name!r} not in {SWEEP_AXES}")
        grid[name] = list(config.sweep.get(name, DEFAULT_GRIDS[name]))
    if "strategy" not in grid:
        grid["strategy"] = [a for a in config.arms]
    points = sweep_points(config, grid)
    if config.logistic_baseline:
        points.append(Point("logistic"))
    tag = hashlib.sha256(json.dumps(grid, sort_keys=True).encode()).hexdigest()[:6]
    run_dir = (Path(run_root) / f"run-{config.hash()}-sweep-{tag}"
               if run_root is not None else None)
    return _execute(config, points, run_dir, jobs)


# --------------------------------------------------------------------------
# audits and offline reports
# --------------------------------------------------------------------------


def audit_leakage(run_dir: str | Path) -> list[str]:
    """Return violations: test patients found in any training-side stage of their cell."""
    problems = []
    for cell in sorted((Path(run_dir) / "cells").iterdir()):
        split = json.loads((cell / "split.json").read_text())
        test = set(split["test_patients"])
        for name in ("train_patients", "valid_patients"):
            bad = test & set(split[name])
            if bad:
                problems.append(f"{cell.name}: {name} contains test patients {sorted(bad)}")
        for prov_path in sorted(cell.glob("*/provenance.json")):
            prov = json.loads(prov_path.read_text())
            for stage, pids in prov.items():
                if stage == "valid_patients":
                    continue
                bad = test & set(pids)
                if bad:
                    problems.append(f"{cell.name}/{prov_path.parent.name}: {stage} contains "
                                    f"test patients {sorted(bad)}")
    return problems


def regenerate_report(run_dir: str | Path) -> dict[str, CvSummary]:
    """Rebuild ``summary.json``/``sweep.csv`` and figure tables from per-cell artifacts."""
    run_dir = Path(run_dir)
    cells: dict[str, dict[str, dict]] = {}
    keys: list[str] = []
    for cell in sorted((run_dir / "cells").iterdir()):
        res = {}
        for rp in sorted(cell.glob("*/report.json")):
            res[rp.parent.name] = json.loads(rp.read_text())
            keys.append(rp.parent.name)
        cells[cell.name] = res
    points = [_point_from_key(k) for k in dict.fromkeys(sorted(keys))]
    summaries = aggregate(cells, points)
    write_summary(run_dir, summaries, points)
    _write_distillation_table(run_dir)
    return summaries


def _point_from_key(key: str) -> Point:
    if key in ("none", "logistic"):
        return Point(key)
    if key.startswith("distill_E"):
        return Point("distill", max_epoch=int(key[len("distill_E"):]))
    if key.startswith("noise_"):
        _, f, e = key.split("_")
        return Point("noise", None, int(f[1:]), int(e[1:]))
    arm, a, f, e = key.split("_")
    return Point(arm, float(a[1:]), int(f[1:]), int(e[1:]))


def _write_distillation_table(run_dir: Path) -> None:
    rows = []
    for cell in sorted((run_dir / "cells").iterdir()):
        split = json.loads((cell / "split.json").read_text())
        row = {"cell": cell.name,
               "train_clean_fraction": split.get("train_clean_fraction"),
               "certain_clean_fraction": split.get("certain_clean_fraction"),
               "certain_size": split.get("certain_size")}
        ds = cell / "distance_shift.json"
        if ds.exists():
            for c in json.loads(ds.read_text())["classes"]:
                row[f"class{c['label']}_full_median"] = c["full_median"]
                row[f"class{c['label']}_distilled_median"] = c["distilled_median"]
        rows.append(row)
    if not rows:
        return
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with open(run_dir / "distillation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in cols})
