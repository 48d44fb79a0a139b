import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mrsdistill.errors import ConfigError
from mrsdistill.pipeline import (
    DEFAULT_GRIDS, ExperimentConfig, Point, _point_from_key, audit_leakage, baseline_logistic,
    load_experiment_config, regenerate_report, run_experiment, run_sweep, sweep_points,
)
from mrsdistill.spectra import Dataset, generate_cohort

from conftest import small_experiment_config


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_smoke_two_folds(tmp_path):
    res = run_experiment(small_experiment_config(), tmp_path)
    assert set(res.summaries) == {"none", "distill_E2", "both_a0.5_f5_E2"}
    for s in res.summaries.values():
        assert len(s.per_fold) == 2 and not s.missing
        assert 0.0 <= s.mean["auc"] <= 1.0
    run_dir = res.run_dir
    assert run_dir.name == f"run-{small_experiment_config().hash()}"
    for name in ("config.json", "summary.json", "sweep.csv"):
        assert (run_dir / name).exists()
    cell = run_dir / "cells" / "fold00_seed0"
    for name in ("split.json", "certain.json", "distill_log.json", "distance_shift.csv",
                 "none/report.json", "none/checkpoint.npz", "both_a0.5_f5_E2/provenance.json"):
        assert (cell / name).exists(), name
    assert audit_leakage(run_dir) == []


def test_runs_are_byte_identical(tmp_path):
    cfg = small_experiment_config(arms=["none", "both"])
    a = run_experiment(cfg, tmp_path / "a").run_dir
    b = run_experiment(cfg, tmp_path / "b").run_dir
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys()
    assert [k for k in fa if fa[k] != fb[k]] == []


def test_parallel_matches_sequential(tmp_path):
    cfg = small_experiment_config(arms=["none"], seeds=[0, 1])
    a = run_experiment(cfg, tmp_path / "a", jobs=1).run_dir
    b = run_experiment(cfg, tmp_path / "b", jobs=2).run_dir
    assert _files(a) == _files(b)


def test_leakage_audit_flags_contamination(tmp_path):
    run_dir = run_experiment(small_experiment_config(arms=["both"]), tmp_path).run_dir
    cell = run_dir / "cells" / "fold00_seed0"
    split = json.loads((cell / "split.json").read_text())
    prov_path = cell / "both_a0.5_f5_E2" / "provenance.json"
    prov = json.loads(prov_path.read_text())
    prov["augment_partner_patients"].append(split["test_patients"][0])
    prov_path.write_text(json.dumps(prov))
    problems = audit_leakage(run_dir)
    assert len(problems) == 1 and "augment_partner_patients" in problems[0]


def test_factor_zero_equals_distill_only(tmp_path):
    cfg = small_experiment_config(arms=["distill", "both"], sweep={"factor": [0, 2]})
    res = run_sweep(cfg, tmp_path, axes=["factor"])
    s0 = res.summaries["both_a0.5_f0_E2"]
    sd = res.summaries["distill_E2"]
    assert [r.auc for r in s0.per_fold] == [r.auc for r in sd.per_fold]


def test_sweep_csv_rows_and_regenerate(tmp_path):
    cfg = small_experiment_config(arms=["both", "same"], sweep={"alpha": [0.25, 0.75]})
    res = run_sweep(cfg, tmp_path, axes=["alpha"])
    rows = list(csv.DictReader(open(res.run_dir / "sweep.csv")))
    assert sorted((r["strategy"], r["alpha"]) for r in rows) == [
        ("both", "0.25"), ("both", "0.75"), ("same", "0.25"), ("same", "0.75")]
    before = (res.run_dir / "sweep.csv").read_bytes()
    (res.run_dir / "sweep.csv").unlink()
    regenerate_report(res.run_dir)
    assert (res.run_dir / "sweep.csv").read_bytes() == before
    assert (res.run_dir / "distillation.csv").exists()


def test_default_alpha_grid_gives_ten_points_per_strategy():
    cfg = small_experiment_config(arms=["same", "other", "both"])
    points = sweep_points(cfg, {"alpha": DEFAULT_GRIDS["alpha"],
                                "strategy": ["same", "other", "both"]})
    assert len(points) == 30
    assert DEFAULT_GRIDS["max_epoch"] == list(range(1, 11))


@pytest.mark.parametrize("point", [Point("none"), Point("logistic"),
                                   Point("distill", max_epoch=3), Point("noise", None, 4, 2),
                                   Point("other", 0.35, 6, 7)])
def test_point_keys_round_trip(point):
    assert _point_from_key(point.key) == point


def _blobs(n=200, shift=4.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 288)) + shift * y[:, None] * (np.arange(288) < 20)
    return Dataset(x, y, y, [f"p{i // 5}" for i in range(n)])


def test_logistic_baseline_sanity():
    train, test = _blobs(seed=0), _blobs(seed=1)
    assert baseline_logistic(train, test).auc >= 0.99
    rng = np.random.default_rng(2)
    shuffled = train.with_labels(rng.permutation(train.labels))
    aucs = [baseline_logistic(shuffled, test, seed=s).auc for s in range(2)]
    assert abs(np.mean(aucs) - 0.5) <= 0.1
    a = baseline_logistic(train, test, seed=3)
    assert a == baseline_logistic(train, test, seed=3)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ConfigError):
        small_experiment_config(seeds=[])
    with pytest.raises(ConfigError):
        small_experiment_config(arms=["mixup"])
    with pytest.raises(ConfigError):
        small_experiment_config(sweep={"lr": [1]})
    cfg = small_experiment_config()
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_experiment_config(path)
    assert again.hash() == cfg.hash()


def test_cohort_path_relative_to_config(tmp_path):
    cfg = small_experiment_config()
    (tmp_path / "cohort.json").write_text(json.dumps(cfg.cohort.to_dict()))
    d = cfg.to_dict()
    d["cohort"] = "cohort.json"
    (tmp_path / "exp.json").write_text(json.dumps(d))
    loaded = load_experiment_config(tmp_path / "exp.json")
    assert loaded.cohort == str(tmp_path / "cohort.json")
    from mrsdistill.pipeline import load_cohort
    assert load_cohort(loaded.cohort) == generate_cohort(cfg.cohort)
