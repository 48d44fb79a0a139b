import numpy as np
import pytest

from mrsdistill.nn import NetworkConfig
from mrsdistill.spectra import CohortConfig, LabelNoiseSpec, MetabolitePeak, generate_cohort


def tiny_network_config(**kw) -> NetworkConfig:
    base = dict(input_length=24, kernel_width=5, initial_filters=2, n_res_blocks=3,
                subsample_blocks=(1, 3), filter_double_blocks=(3,), dropout_rate=0.3)
    base.update(kw)
    return NetworkConfig(**base)


def small_cohort_config(n_patients=12, noise=None, seed=0, voxels=(3, 5)) -> CohortConfig:
    healthy = [MetabolitePeak("NAA", 200, 3.0, (8.0, 10.0)), MetabolitePeak("Cho", 85, 3.0, (2.0, 3.0))]
    tumor = [MetabolitePeak("NAA", 200, 3.0, (3.0, 5.0)), MetabolitePeak("Cho", 85, 3.0, (5.0, 7.0)),
             MetabolitePeak("Lip", 260, 6.0, (2.0, 4.0))]
    return CohortConfig(
        n_patients=n_patients, voxels_per_patient_range=voxels,
        class_profiles={0: healthy, 1: tumor}, baseline_distortion_amplitude=0.5,
        noise_sigma=0.2, label_noise=noise or LabelNoiseSpec(), seed=seed,
    )


@pytest.fixture
def small_cohort():
    return generate_cohort(small_cohort_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_experiment_config(**kw):
    from mrsdistill.nn import NetworkConfig, TrainConfig
    from mrsdistill.pipeline import ExperimentConfig
    from mrsdistill.spectra import LabelNoiseSpec

    base = dict(
        cohort=small_cohort_config(n_patients=20, noise=LabelNoiseSpec("asymmetric", 0.2)),
        folds=2, seeds=[0], arms=["none", "distill", "both"],
        network=NetworkConfig(kernel_width=5, initial_filters=2, n_res_blocks=3,
                              subsample_blocks=(1, 3), filter_double_blocks=(3,)),
        train=TrainConfig(epochs=2, batch_size=16, learning_rate=1e-2),
        theta=0.6, max_epoch=2,
    )
    base.update(kw)
    return ExperimentConfig(**base)


# one pass/fail line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
