"""Shared fixtures: small Gaussian blobs, trained sources, a tiny synthetic cohort."""

from __future__ import annotations

import numpy as np
import pytest

from emg_transfer.schemas import ExperimentConfig
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec
from emg_transfer.services.lssvm import train_multiclass

CENTERS = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])


def make_blobs(n_per_class: int, seed: int, shift=(0.0, 0.0), spread: float = 0.4) -> FeatureSet:
    rng = np.random.default_rng(seed)
    vectors, labels = [], []
    for cls, center in enumerate(CENTERS):
        vectors.append(center + np.asarray(shift) + spread * rng.standard_normal((n_per_class, 2)))
        labels.append(np.full(n_per_class, cls))
    labels = np.concatenate(labels)
    return FeatureSet(np.vstack(vectors), labels, np.ones_like(labels))


@pytest.fixture
def blobs() -> FeatureSet:
    return make_blobs(8, seed=0)


@pytest.fixture
def blobs_test() -> FeatureSet:
    return make_blobs(10, seed=1)


@pytest.fixture
def sources() -> list:
    return [
        train_multiclass(make_blobs(10, seed=10 + k, shift=s), KernelSpec.rbf(0.5), 10.0, subject_id=f"src{k}")
        for k, s in enumerate([(0.3, 0.0), (0.0, -0.3)])
    ]


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Four synthetic subjects small enough for end-to-end runs."""
    return ExperimentConfig.model_validate(
        {
            "cohort": {
                "synthetic": {
                    "subjects": ["s1", "s2", "s3", "s4"],
                    "class_count": 3,
                    "channels": 3,
                    "reps": 6,
                    "movement_len": 200,
                    "rest_len": 200,
                    "mean_scale": 2.0,
                    "seed": 7,
                }
            },
            "targets": ["s1", "s2", "s3", "s4"],
            "sources": ["s1", "s2", "s3", "s4"],
            "windowing": {"window_len": 40, "shift": 20},
            "split": {"subsample_stride": 1},
            "grid": {"C": [1.0, 10.0], "gamma": [0.1, 1.0], "folds": 3},
            "curve": {"steps": [60, 120]},
            "mkal": {"epochs": 2},
            "out_dir": str(tmp_path / "out"),
            "cache_dir": str(tmp_path / "cache"),
            "seed": 3,
        }
    )
