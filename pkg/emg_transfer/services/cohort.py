"""Per-subject pipeline: recording -> windows -> train/test FeatureSets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from emg_transfer.errors import DataError
from emg_transfer.schemas import ExperimentConfig
from emg_transfer.services.emg_data import (
    PreparedWindows,
    Recording,
    WindowingConfig,
    generate_synthetic_cohort,
    generate_synthetic_recording,
    load_recording,
    save_recording,
    split_by_repetition,
    subsample,
    window_recording,
)
from emg_transfer.services.features import FeatureSet, extract_combined, extract_histogram
from emg_transfer.utils import hash_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubjectData:
    subject_id: str
    train: FeatureSet
    test: FeatureSet
    data_hash: str

    @property
    def labels(self) -> np.ndarray:
        return np.union1d(self.train.labels, self.test.labels)


class Cohort:
    """Subjects of one experiment, either CSV exports or a synthetic cohort."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        synthetic = cfg.cohort.synthetic
        self._specs = generate_synthetic_cohort(synthetic) if synthetic is not None else {}
        self._cache: dict[str, SubjectData] = {}

    @property
    def is_synthetic(self) -> bool:
        return self.cfg.cohort.synthetic is not None

    def recording_path(self, subject_id: str) -> Path:
        cohort = self.cfg.cohort
        return Path(cohort.csv_dir or ".") / cohort.pattern.format(id=subject_id)

    def synthetic_seeds(self) -> dict[str, int]:
        return {sid: spec.seed for sid, spec in self._specs.items()}

    def recording(self, subject_id: str) -> Recording:
        if self.is_synthetic:
            spec = self._specs.get(subject_id)
            if spec is None:
                raise DataError(f"subject '{subject_id}' is not part of the synthetic cohort")
            synthetic = self.cfg.cohort.synthetic
            return generate_synthetic_recording(spec, synthetic.reps, synthetic.movement_len, synthetic.rest_len)
        return load_recording(
            self.recording_path(subject_id),
            self.cfg.cohort.columns,
            sample_rate=self.cfg.cohort.sample_rate,
        )

    def prepare_windows(self, rec: Recording) -> PreparedWindows:
        """Window, split by repetition, then subsample the temporally ordered train stream."""
        windowing = WindowingConfig(self.cfg.windowing.window_len, self.cfg.windowing.shift)
        split = self.cfg.split
        train, test = split_by_repetition(window_recording(rec, windowing), split.train_reps, split.test_reps)
        return PreparedWindows(train=subsample(train, split.subsample_stride), test=test)

    def _extract(self, windows: PreparedWindows) -> tuple[FeatureSet, FeatureSet]:
        feats = self.cfg.features
        if not windows.train:
            raise DataError("no training windows after splitting")
        if feats.kind == "histogram":
            train, ranges, normalizer = extract_histogram(windows.train, bins=feats.bins, normalize=feats.normalize)
            test = extract_histogram(windows.test, ranges, normalizer, bins=feats.bins)[0] if windows.test else None
        else:
            train, normalizer = extract_combined(windows.train, normalize=feats.normalize)
            test = extract_combined(windows.test, normalizer)[0] if windows.test else None
        if test is None:
            raise DataError("no test windows after splitting")
        return train, test

    def subject(self, subject_id: str) -> SubjectData:
        """Features of one subject, normalized with its own training statistics."""
        cached = self._cache.get(subject_id)
        if cached is not None:
            return cached
        train, test = self._extract(self.prepare_windows(self.recording(subject_id)))
        token = json.dumps(
            {
                "windowing": self.cfg.windowing.model_dump(),
                "split": self.cfg.split.model_dump(),
                "features": self.cfg.features.model_dump(),
            },
            sort_keys=True,
        )
        data_hash = hash_arrays(train.vectors, train.labels, train.repetitions, extra=(token,))
        data = SubjectData(subject_id, train, test, data_hash)
        logger.info("subject %s: %d train / %d test items, d=%d", subject_id, len(train), len(test), train.dim)
        self._cache[subject_id] = data
        return data

    def class_set(self, subject_ids: list[str]) -> np.ndarray:
        """Class ids of the experiment, either configured or the union over subjects."""
        if self.cfg.class_count is not None:
            return np.arange(self.cfg.class_count)
        if self.is_synthetic:
            return np.arange(self.cfg.cohort.synthetic.class_count + 1)
        labels = [self.subject(sid).labels for sid in subject_ids]
        return np.unique(np.concatenate(labels))


def write_synthetic_cohort(cfg: ExperimentConfig, out_dir: Optional[str | Path] = None) -> list[Path]:
    """Materialize the synthetic cohort as CSV files named by the cohort pattern."""
    cohort = Cohort(cfg)
    if not cohort.is_synthetic:
        raise DataError("the configured cohort is not synthetic")
    out_dir = Path(out_dir or cfg.out_dir)
    written = []
    for subject_id in cfg.cohort.synthetic.subjects:
        path = out_dir / cfg.cohort.pattern.format(id=subject_id)
        written.append(save_recording(cohort.recording(subject_id), path, cfg.cohort.columns))
        logger.info("wrote %s", path)
    return written
