"""Command-line entry point: ``python -m mrsdistill <verb> ...``.

Exit status is 0 on success, 1 on a domain error (bad data, invalid config
values, diverged training) and 2 on a usage error or unreadable config file.
Every flag can also be given through an environment variable named
``MRSDISTILL_<FLAG>`` (for example ``MRSDISTILL_SEED=3``); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analyze, pipeline
from .augment import augment_arrays
from .distill import CertainSet, distance_shift_report, run_distillation
from .errors import ConfigError, DivergenceError, ParseError, ShapeError, StateError
from .evaluation import evaluate, patient_labels_from, write_report_json, write_roc_csv
from .nn import Network, load_checkpoint, predict_proba, save_checkpoint, train
from .rng import derive_seed
from .spectra import (CohortConfig, Dataset, generate_cohort, load_dataset, save_dataset,
                      split_leave_subjects_out, split_patients)

log = logging.getLogger("mrsdistill")

ENV_PREFIX = "MRSDISTILL_"
DOMAIN_ERRORS = (ConfigError, ParseError, ShapeError, StateError, DivergenceError)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config loading (never touches the output location)
# --------------------------------------------------------------------------


def _read_json(path: str | None, what: str) -> dict:
    if path is None:
        raise UsageError(f"{what} requires --config")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        with open(p, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc


def _experiment(args) -> pipeline.ExperimentConfig:
    d = _read_json(args.config, args.verb)
    cfg = pipeline.ExperimentConfig.from_dict(d, base_dir=Path(args.config).parent)
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def _cohort(args) -> CohortConfig:
    d = _read_json(args.config, args.verb)
    cfg = CohortConfig.from_dict(d.get("cohort", d) if isinstance(d.get("cohort"), dict) else d)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _data(args, cfg: pipeline.ExperimentConfig | None = None) -> Dataset:
    if getattr(args, "data", None):
        if not Path(args.data).is_file():
            raise UsageError(f"data file not found: {args.data}")
        return load_dataset(args.data)
    if cfg is None:
        raise UsageError(f"{args.verb} requires --data")
    return pipeline.load_cohort(cfg.cohort)


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.verb} requires --out")
    return Path(args.out)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = _cohort(args)
    out = _need_out(args)
    ds = generate_cohort(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    n0, n1 = ds.class_counts()
    _emit({"path": str(out), "n_spectra": len(ds), "n_patients": len(ds.patients()),
           "label_counts": [n0, n1]})


def cmd_split(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    data = _data(args, cfg)
    folds = split_leave_subjects_out(data, cfg.folds, np.random.default_rng(cfg.split_seed))
    table = []
    for f, (tr, te) in enumerate(folds):
        table.append({"fold": f, "train_patients": sorted(set(data.patient_ids[tr].tolist())),
                      "test_patients": sorted(set(data.patient_ids[te].tolist()))})
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _emit({"path": str(out), "folds": len(table)})


def cmd_distill(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    data = _data(args, cfg)
    seed = cfg.seeds[0]
    real = np.flatnonzero(~data.synthetic)
    out.mkdir(parents=True, exist_ok=True)
    res = run_distillation(data, cfg.distill_config(), seed, eligible=real,
                           checkpoint_dir=out if args.checkpoints else None)
    res.certain.save(out / "certain.json")
    (out / "distill_log.json").write_text(json.dumps(res.log, indent=1) + "\n", encoding="utf-8")
    try:
        report = distance_shift_report(data.subset(real), res.certain.member_indices)
        report.write_csv(out / "distance_shift.csv")
    except ConfigError as exc:
        log.warning("no distance report: %s", exc)
    _emit({"certain": len(res.certain.member_indices),
           "per_epoch_counts": res.certain.per_epoch_counts})


def cmd_augment(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    if not args.certain or not Path(args.certain).is_file():
        raise UsageError(f"certain-set file not found: {args.certain}")
    data = _data(args, cfg)
    certain = CertainSet.load(args.certain)
    if args.max_epoch is not None:
        certain = certain.up_to_epoch(args.max_epoch)
    c_set = data.subset(certain.member_indices, name="certain")
    acfg = replace(cfg.augment, seed=derive_seed(cfg.seeds[0], "augment"))
    aug = augment_arrays(c_set.values, c_set.labels, acfg).to_dataset(c_set)
    combined = c_set if aug is None else Dataset.concat([c_set, aug], name="primary")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(combined, out)
    _emit({"path": str(out), "certain": len(c_set), "augmented": 0 if aug is None else len(aug)})


def cmd_train(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    data = _data(args, cfg)
    seed = cfg.seeds[0]
    valid = None
    if args.valid:
        valid = load_dataset(args.valid)
    elif cfg.validation_fraction > 0:
        keep, hold = split_patients(data, cfg.validation_fraction,
                                    np.random.default_rng(derive_seed(seed, "validation")))
        data, valid = data.subset(keep), data.subset(hold)
    net = Network(cfg.network, seed=derive_seed(seed, "primary-net"))
    tcfg = replace(cfg.train, seed=derive_seed(seed, "primary-train"))
    res = train(net, data, valid, tcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, net, res.optimizer_state, res.log)
    _emit({"path": str(out), "best_epoch": res.best_epoch,
           "final_train_loss": res.log[-1]["train_loss"] if res.log else None})


def _checkpoint(args) -> Network:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint file not found: {args.checkpoint}")
    return load_checkpoint(args.checkpoint)[0]


def cmd_evaluate(args) -> None:
    net = _checkpoint(args)
    data = _data(args)
    out = _need_out(args)
    probs = predict_proba(net, data)
    truth = np.where(data.true_labels >= 0, data.true_labels, data.labels)
    report = evaluate(probs, data.labels, data.patient_ids,
                      patient_labels_from(truth, data.patient_ids), true_labels=data.true_labels)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out / "report.json")
    write_roc_csv(report, out / "roc.csv")
    _emit(report.metrics())


def cmd_cam(args) -> None:
    net = _checkpoint(args)
    data = _data(args)
    out = _need_out(args)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"spectrum index {args.index} outside 0..{len(data) - 1}")
    spec = data[args.index]
    cams = [analyze.class_activation_map(net, spec, c, method=args.upsample)
            for c in range(net.config.n_classes)]
    out.parent.mkdir(parents=True, exist_ok=True)
    analyze.write_cam_csv(out, spec.values, cams)
    _emit({"path": str(out), "logits": [c.logit for c in cams]})


def cmd_cluster(args) -> None:
    data = _data(args)
    out = _need_out(args)
    lo, _, hi = args.k_range.partition("-")
    try:
        ks = list(range(int(lo), int(hi or lo) + 1))
    except ValueError as exc:
        raise UsageError(f"--k-range must look like 2-10, got {args.k_range!r}") from exc
    seed = args.seed if args.seed is not None else 0
    scan = analyze.elbow_scan(data, ks, seed=seed, restarts=args.restarts)
    k = args.k if args.k is not None else ks[-1]
    result = analyze.kmeans(data, k, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "elbow.csv", "w", encoding="utf-8") as fh:
        fh.write("k,inertia,inertia_monotone\n")
        for kk, raw, mono in scan.rows():
            fh.write(f"{kk},{raw!r},{mono!r}\n")
    result.save(out / "kmeans.json", out / "centroids.csv")
    analyze.write_crosstab_csv(analyze.crosstab(result.assignments, data.labels, k),
                               out / "crosstab.csv")
    _emit({"k": k, "inertia": result.inertia, "elbow": scan.monotone})


def cmd_sweep(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    axes = args.axis or None
    res = pipeline.run_sweep(cfg, out, axes=axes, jobs=args.jobs)
    _emit({"run_dir": str(res.run_dir),
           "points": {k: s.mean["auc"] for k, s in res.summaries.items()}})


def cmd_run(args) -> None:
    cfg = _experiment(args)
    out = _need_out(args)
    res = pipeline.run_experiment(cfg, out, jobs=args.jobs)
    problems = pipeline.audit_leakage(res.run_dir)
    for p in problems:
        log.error("leakage: %s", p)
    _emit({"run_dir": str(res.run_dir), "leakage_violations": len(problems),
           "auc": {k: [s.mean["auc"], s.std["auc"]] for k, s in res.summaries.items()}})
    if problems:
        raise ConfigError(f"{len(problems)} leakage violations")


def cmd_report(args) -> None:
    run_dir = Path(args.run or args.out or "")
    if not (run_dir / "cells").is_dir():
        raise UsageError(f"not a run directory: {run_dir}")
    summaries = pipeline.regenerate_report(run_dir)
    problems = pipeline.audit_leakage(run_dir)
    _emit({"run_dir": str(run_dir), "leakage_violations": problems,
           "auc": {k: [s.mean["auc"], s.std["auc"]] for k, s in summaries.items()}})


VERBS = {
    "generate": (cmd_generate, "generate a synthetic cohort CSV from a cohort config"),
    "split": (cmd_split, "write the patient-wise fold assignment"),
    "distill": (cmd_distill, "run confidence-threshold distillation on a dataset"),
    "augment": (cmd_augment, "mix a distilled set into an augmented training CSV"),
    "train": (cmd_train, "train a network and write a checkpoint"),
    "evaluate": (cmd_evaluate, "evaluate a checkpoint on a dataset"),
    "cam": (cmd_cam, "class activation maps for one spectrum"),
    "cluster": (cmd_cluster, "k-means elbow scan and class cross-tab"),
    "sweep": (cmd_sweep, "cross-validated parameter sweep"),
    "run": (cmd_run, "cross-validated experiment over the configured arms"),
    "report": (cmd_report, "rebuild summary tables from a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=os.environ.get(ENV_PREFIX + "CONFIG"))
    common.add_argument("--out", default=os.environ.get(ENV_PREFIX + "OUT"))
    common.add_argument("--seed", type=int, default=_env_int("SEED"))
    common.add_argument("--jobs", type=int, default=_env_int("JOBS") or 1)
    common.add_argument("--verbose", "-v", action="count", default=_env_int("VERBOSE") or 0)
    common.add_argument("--data", default=os.environ.get(ENV_PREFIX + "DATA"),
                        help="dataset CSV (overrides the config's cohort)")

    parser = argparse.ArgumentParser(prog="mrsdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=text)
            for name, (_, text) in VERBS.items()}
    subs["distill"].add_argument("--checkpoints", action="store_true",
                                 help="save the network after every epoch")
    subs["augment"].add_argument("--certain", help="certain.json from the distill verb")
    subs["augment"].add_argument("--max-epoch", type=int, help="truncate the certain set to E")
    subs["train"].add_argument("--valid", help="validation CSV (default: patient holdout)")
    for name in ("evaluate", "cam"):
        subs[name].add_argument("--checkpoint")
    subs["cam"].add_argument("--index", type=int, default=0)
    subs["cam"].add_argument("--upsample", choices=("nearest", "linear"), default="nearest")
    subs["cluster"].add_argument("--k-range", default="2-10")
    subs["cluster"].add_argument("--k", type=int)
    subs["cluster"].add_argument("--restarts", type=int, default=10)
    subs["sweep"].add_argument("--axis", action="append", choices=pipeline.SWEEP_AXES)
    subs["report"].add_argument("--run", help="run directory")
    return parser


def _env_int(name: str) -> int | None:
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        print(f"mrsdistill: ignoring non-integer {ENV_PREFIX}{name}={raw!r}", file=sys.stderr)
        return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("mrsdistill: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    handler = VERBS[args.verb][0]
    try:
        handler(args)
    except UsageError as exc:
        print(f"mrsdistill {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"mrsdistill {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (TypeError, KeyError) as exc:
        # malformed config structure (unknown or missing field)
        print(f"mrsdistill {args.verb}: invalid config: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
