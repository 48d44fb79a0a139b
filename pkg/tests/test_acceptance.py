"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 5-7 and 11 train full-size networks on the shipped synthetic cohort and
take most of an hour on one CPU core; they are marked ``slow``.
"""

import itertools
import time

import numpy as np
import pytest

from gradcheck import max_relative_error, random_mini_config
from mrsdistill.analyze import class_activation_map, kmeans, upsample
from mrsdistill.augment import AugmentConfig, augment_arrays, mix_samples
from mrsdistill.distill import (DistillConfig, certain_from_probs, collect_certain,
                                distance_shift_report, run_distillation)
from mrsdistill.evaluation import auc_score
from mrsdistill.nn import Network, NetworkConfig, TrainConfig, load_checkpoint, train
from mrsdistill.pipeline import ExperimentConfig, audit_leakage, run_experiment
from mrsdistill.rng import make_rng
from mrsdistill.spectra import (Dataset, LabelNoiseSpec, Spectrum, clean_fraction,
                                default_cohort_config, generate_cohort, oversample_minority)

import conftest
from conftest import small_cohort_config, tiny_network_config

# the reference architecture's output-size column, batch dimension 32, notational "1" dropped
TABLE_OUTPUT_SHAPES = [
    ("stem", (32, 288, 16)),
    ("block1", (32, 144, 16)), ("block2", (32, 144, 16)),
    ("block3", (32, 72, 32)), ("block4", (32, 72, 32)),
    ("block5", (32, 36, 64)), ("block6", (32, 36, 64)),
    ("block7", (32, 18, 128)), ("block8", (32, 18, 128)),
    ("gap", (32, 128)), ("dense", (32, 2)),
]

DISTILL_SEEDS = [0, 1, 2, 3, 4]
PAIRED_SEEDS = [0, 1, 2, 3]
PAIRED_EPOCHS = 8


def report(n: int, ok: bool, detail: str, elapsed: float) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s]"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)


def concordance(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size


# --- fast criteria -------------------------------------------------------------


def test_criterion_01_architecture_conformance():
    net = Network(NetworkConfig(), seed=0)
    t = time.perf_counter()
    trace = net.shape_trace(32)
    elapsed = time.perf_counter() - t
    n_convs = len(net.conv_kernel_names())
    ok = trace == TABLE_OUTPUT_SHAPES and n_convs == 17 and elapsed < 1.0
    report(1, ok, f"shape trace matches={trace == TABLE_OUTPUT_SHAPES}, conv kernels={n_convs}",
           elapsed)
    assert trace == TABLE_OUTPUT_SHAPES
    assert n_convs == 17
    assert elapsed < 1.0


def test_criterion_02_gradient_correctness():
    t = time.perf_counter()
    r = np.random.default_rng(2)
    errors = [max_relative_error(random_mini_config(r), seed=i) for i in range(24)]
    elapsed = time.perf_counter() - t
    worst = max(errors)
    ok = worst <= 1e-4 and elapsed < 120
    report(2, ok, f"24 mini configs, worst relative error {worst:.2e} (<= 1e-4)", elapsed)
    assert worst <= 1e-4
    assert elapsed < 120


def test_criterion_03_auc_oracle_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, size=n) / 5.0 if i % 2 else rng.random(n)
        worst = max(worst, abs(auc_score(scores, labels) - concordance(scores, labels)))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-12 and elapsed < 10
    report(3, ok, f"1000 instances (half tied), max |trapezoid - concordance| = {worst:.1e}",
           elapsed)
    assert worst <= 1e-12
    assert elapsed < 10


def test_criterion_04_distillation_semantics(tmp_path):
    t = time.perf_counter()
    # crafted tables: boundary inclusive, theta 0.5 takes everything
    table = np.array([[0.995, 0.005], [0.9899, 0.0101], [0.99, 0.01], [0.01, 0.99],
                      [0.5, 0.5], [0.3, 0.7]])
    crafted_ok = (certain_from_probs(table, 0.99).tolist() == [0, 2, 3]
                  and certain_from_probs(table, 0.5).tolist() == list(range(6)))

    ds = generate_cohort(small_cohort_config(n_patients=16, voxels=(10, 14),
                                             noise=LabelNoiseSpec("asymmetric", 0.2)))
    cfg = DistillConfig(theta=0.9, max_epoch=6,
                        network=NetworkConfig(kernel_width=5, initial_filters=8, n_res_blocks=3,
                                              subsample_blocks=(1, 3), filter_double_blocks=(3,)),
                        train=TrainConfig(batch_size=8, learning_rate=1e-2))
    cs = run_distillation(ds, cfg, seed=4, checkpoint_dir=tmp_path).certain
    union_ok = cs.member_indices == sorted(set().union(*map(set, cs.per_epoch_members)))
    replay_ok, mono_ok = True, True
    thetas = [0.55, 0.7, 0.9, 0.97, 0.999]
    for e in range(1, 7):
        net = load_checkpoint(tmp_path / f"epoch_{e:02d}.npz")[0]
        replay_ok &= collect_certain(net, ds, 0.9).tolist() == cs.per_epoch_members[e - 1]
        sets = [set(collect_certain(net, ds, th).tolist()) for th in thetas]
        mono_ok &= all(b <= a for a, b in zip(sets, sets[1:]))
    elapsed = time.perf_counter() - t
    nonempty = len(cs.member_indices) > 0
    ok = crafted_ok and union_ok and replay_ok and mono_ok and nonempty and elapsed < 60
    report(4, ok, f"crafted={crafted_ok} union={union_ok} replay={replay_ok} "
                  f"theta-monotone={mono_ok} (|C|={len(cs.member_indices)} of {len(ds)})", elapsed)
    assert crafted_ok and union_ok and replay_ok and mono_ok and nonempty
    assert elapsed < 60


def test_criterion_08_mixing_exactness_and_counts():
    t = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(1000):
        a, b = rng.normal(size=288) * 5, rng.normal(size=288) * 5
        alpha = [0.0, 1.0][i] if i < 2 else float(rng.random())
        out = mix_samples(Spectrum(a, "t", 0, 0), Spectrum(b, "p", 1, 1), alpha)
        worst = max(worst, float(np.max(np.abs(out.values - ((1 - alpha) * a + alpha * b)))))
        if alpha == 0.0:
            assert np.array_equal(out.values, a)
        if alpha == 1.0:
            assert np.array_equal(out.values, b) and out.label == 0
    values = rng.normal(size=(15, 288))
    labels = np.array([0] * 7 + [1] * 8)
    counts_ok = all(
        len(augment_arrays(values, labels, AugmentConfig(strategy=s, factor=f, seed=f))) == f * 15
        for s in ("same", "other", "both", "noise") for f in (0, 1, 3, 5))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-13 and counts_ok and elapsed < 5
    report(8, ok, f"1000 triples incl. alpha 0/1, max deviation {worst:.1e}; "
                  f"|A| = factor*|C| for all strategies: {counts_ok}", elapsed)
    assert worst <= 1e-13 and counts_ok
    assert elapsed < 5


def test_criterion_09_cam_identity():
    t = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for trial in range(100):
        cfg = tiny_network_config(input_length=int(rng.integers(12, 40)),
                                  initial_filters=int(rng.integers(1, 4)))
        net = Network(cfg, seed=trial)
        x = rng.normal(size=(16, cfg.input_length))
        y = np.arange(16) % 2
        x[y == 1] += 0.5
        train(net, Dataset(x, y, y, [f"p{i}" for i in range(16)]), None,
              TrainConfig(epochs=1, batch_size=8, seed=trial))
        probe = rng.normal(size=cfg.input_length)
        logits = net.forward(probe[None, :])[0]
        for c in (0, 1):
            cam = class_activation_map(net, probe, c)
            worst = max(worst, abs(cam.raw.mean() + cam.bias - logits[c]))
    full = Network(NetworkConfig(dtype="float32"), seed=0)
    cam = class_activation_map(full, rng.normal(size=288), 1)
    up_ok = (cam.raw.shape == (18,) and cam.upsampled.shape == (288,)
             and all(np.all(cam.upsampled[16 * i:16 * i + 16] == cam.raw[i]) for i in range(18))
             and np.array_equal(upsample(np.arange(18.0), 288), np.repeat(np.arange(18.0), 16)))
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-9 and up_ok and elapsed < 30
    report(9, ok, f"100 trained nets, max |mean CAM + bias - logit| = {worst:.1e}; "
                  f"18 -> 288 by 16x repetition: {up_ok}", elapsed)
    assert worst <= 1e-9 and up_ok
    assert elapsed < 30


def test_criterion_10_kmeans():
    t = time.perf_counter()
    rng = np.random.default_rng(10)
    matches, monotone = 0, True
    for _ in range(50):
        n = int(rng.integers(4, 13))
        x = rng.normal(size=(n, 4))
        x[: n // 2] += rng.uniform(0.5, 3.0)
        runs = [kmeans(x, 2, seed=s) for s in range(10)]
        monotone &= all(np.all(np.diff(r.history) <= 1e-9 * r.history[0]) for r in runs)
        best = min(r.inertia for r in runs)
        oracle = np.inf
        for bits in itertools.product((0, 1), repeat=n - 1):
            a = np.array((0,) + bits)
            if a.max() == 0:
                continue
            oracle = min(oracle, sum(np.sum((x[a == c] - x[a == c].mean(0)) ** 2) for c in (0, 1)))
        matches += abs(best - oracle) <= 1e-9 * max(oracle, 1.0)
    elapsed = time.perf_counter() - t
    ok = matches == 50 and monotone and elapsed < 60
    report(10, ok, f"exhaustive 2-partition oracle matched {matches}/50, "
                   f"inertia non-increasing: {monotone}", elapsed)
    assert matches == 50 and monotone
    assert elapsed < 60


# --- experiment criteria ---------------------------------------------------------


@pytest.fixture(scope="module")
def distillation_runs():
    """Distill on the whole shipped cohort (SMOTE-balanced, real rows eligible), one run per seed."""
    t = time.perf_counter()
    data = generate_cohort(default_cohort_config())
    cfg = DistillConfig(network=NetworkConfig(dtype="float32"), train=TrainConfig())
    runs = []
    for seed in DISTILL_SEEDS:
        pool = oversample_minority(data, make_rng(seed, "oversample"))
        certain = run_distillation(pool, cfg, seed, eligible=range(len(data))).certain
        members = certain.member_indices
        runs.append({
            "seed": seed,
            "size": len(members),
            "gain": clean_fraction(data, members) - clean_fraction(data),
            "medians": distance_shift_report(data, members).medians(),
        })
    return data, runs, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_05_distillation_cleans_labels(distillation_runs):
    data, runs, elapsed = distillation_runs
    gains = [r["gain"] for r in runs]
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= 0.10
    report(5, ok, f"{len(data.patients())} patients, 5 seeds: training clean fraction "
                  f"{clean_fraction(data):.3f}, mean gain of C {mean_gain:+.3f} (>= 0.10); "
                  f"per seed {[round(g, 3) for g in gains]}", elapsed)
    assert len(data.patients()) == 60
    assert mean_gain >= 0.10


@pytest.mark.slow
def test_criterion_06_distance_shift(distillation_runs):
    _, runs, elapsed = distillation_runs
    per_seed = [all(dist >= full for full, dist in r["medians"].values()) for r in runs]
    ok = sum(per_seed) >= 4
    detail = "; ".join(
        f"s{r['seed']}: " + ", ".join(f"c{c} {full:.2f}->{dist:.2f}"
                                     for c, (full, dist) in sorted(r["medians"].items()))
        for r in runs)
    report(6, ok, f"distilled >= full medians for both classes in {sum(per_seed)}/5 seeds "
                  f"(need 4): {detail}", elapsed)
    assert sum(per_seed) >= 4


def paired_config(**kw) -> ExperimentConfig:
    base = dict(cohort=default_cohort_config(), folds=2, seeds=PAIRED_SEEDS,
                arms=["none", "both"], network=NetworkConfig(dtype="float32"),
                train=TrainConfig(epochs=PAIRED_EPOCHS), theta=0.99, max_epoch=5,
                augment=AugmentConfig(strategy="both", alpha=0.5, factor=5))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def paired_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("paired")
    t = time.perf_counter()
    res = run_experiment(paired_config(), root)
    return res, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_07_augmentation_helps(paired_run):
    res, elapsed = paired_run
    diffs = {}
    for cell, reports in sorted(res.cells.items()):
        plain, aug = reports["none"], reports["both_a0.5_f5_E5"]
        if "error" in plain or "error" in aug:
            continue
        diffs[cell] = aug["auc"] - plain["auc"]
    mean_diff = float(np.mean(list(diffs.values()))) if diffs else float("nan")
    n_pos = sum(d > 0 for d in diffs.values())
    ok = len(diffs) == 8 and mean_diff > 0 and n_pos >= 6
    report(7, ok, f"2 folds x 4 seeds, {PAIRED_EPOCHS} epochs: mean AUC "
                  f"none {res.summaries['none'].mean['auc']:.4f} vs both "
                  f"{res.summaries['both_a0.5_f5_E5'].mean['auc']:.4f}, paired mean diff "
                  f"{mean_diff:+.4f}, positive in {n_pos}/{len(diffs)} cells (need 6/8)", elapsed)
    assert len(diffs) == 8
    assert mean_diff > 0
    assert n_pos >= 6


@pytest.mark.slow
def test_criterion_11_leakage_and_determinism(paired_run, tmp_path):
    res, _ = paired_run
    t = time.perf_counter()
    problems = audit_leakage(res.run_dir)
    # rerun one cell from scratch; every byte of its artifacts must repeat
    seed = PAIRED_SEEDS[0]
    again = run_experiment(paired_config(seeds=[seed], fold_subset=[0]), tmp_path).run_dir
    cell = f"cells/fold00_seed{seed}"
    first = {p.relative_to(res.run_dir / cell): p.read_bytes()
             for p in sorted((res.run_dir / cell).rglob("*")) if p.is_file()}
    second = {p.relative_to(again / cell): p.read_bytes()
              for p in sorted((again / cell).rglob("*")) if p.is_file()}
    differing = sorted(str(k) for k in first.keys() | second.keys()
                       if first.get(k) != second.get(k))
    elapsed = time.perf_counter() - t
    ok = not problems and not differing and len(first) > 0
    report(11, ok, f"leakage violations {len(problems)}; rerun of {cell}: {len(first)} "
                   f"artifacts, {len(differing)} differ", elapsed)
    assert problems == []
    assert differing == []
