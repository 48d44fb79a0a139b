"""Noisy-label learning for 1D spectra: confidence-based data distillation,
mixing augmentation and a residual 1D CNN, on synthetic MRS cohorts."""

__version__ = "0.1.0"
