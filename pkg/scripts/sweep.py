"""Cross-validated sweeps over alpha, factor and max_epoch (the data behind the AUC-vs-parameter figures).

    python scripts/sweep.py --axis alpha --folds 2 --seeds 0 1 --epochs 8 --out runs/

Prints one line per grid point and leaves sweep.csv in the run directory.
"""

import argparse
import logging

from mrsdistill.nn import NetworkConfig, TrainConfig
from mrsdistill.pipeline import DEFAULT_GRIDS, SWEEP_AXES, ExperimentConfig, run_sweep
from mrsdistill.spectra import default_cohort_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--axis", choices=[a for a in SWEEP_AXES if a != "strategy"], required=True)
    ap.add_argument("--strategies", nargs="+", default=["same", "other", "both"])
    ap.add_argument("--folds", type=int, default=10)
    ap.add_argument("--fold-subset", type=int, nargs="*")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--patients", type=int, default=60)
    ap.add_argument("--float32", action="store_true")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = ExperimentConfig(
        cohort=default_cohort_config(n_patients=args.patients),
        folds=args.folds, seeds=args.seeds, arms=args.strategies,
        fold_subset=args.fold_subset,
        network=NetworkConfig(dtype="float32" if args.float32 else "float64"),
        train=TrainConfig(epochs=args.epochs),
        sweep={args.axis: DEFAULT_GRIDS[args.axis]},
    )
    res = run_sweep(cfg, args.out, axes=[args.axis], jobs=args.jobs)
    for key, s in res.summaries.items():
        print(f"{key:28s} auc {s.mean['auc']:.4f} ± {s.std['auc']:.4f}  (n={len(s.per_fold)})")
    print("run directory:", res.run_dir)


if __name__ == "__main__":
    main()
