"""Time-domain features per window and channel."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from emg_transfer.errors import DataError, DomainError, SchemaError
from emg_transfer.services.emg_data import LabeledWindow

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20
HISTOGRAM_SIGMAS = 3.0
_CHUNK = 256


def _as_window(window) -> np.ndarray:
    arr = np.asarray(window, dtype=float).reshape(-1)
    if arr.size == 0:
        raise DomainError("window must not be empty")
    return arr


def mav(window) -> float:
    """Mean absolute value, (1/T) * sum |x_t|."""
    x = _as_window(window)
    return float(np.mean(np.abs(x)))


def variance(window) -> float:
    """Population variance (divisor T)."""
    x = _as_window(window)
    return float(np.mean((x - x.mean()) ** 2))


def waveform_length(window) -> float:
    """Sum of |x_t - x_{t+1}| for t = 1..T-1."""
    x = _as_window(window)
    if x.size < 2:
        raise DomainError("waveform length needs at least 2 samples")
    return float(np.sum(np.abs(np.diff(x))))


def _check_range(bins: int, lo: float, hi: float) -> None:
    if bins < 1:
        raise DomainError(f"bins must be >= 1, got {bins}")
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise DomainError(f"invalid histogram range ({lo}, {hi})")


def _bin_index(x: np.ndarray, bins: int, lo: float, hi: float) -> np.ndarray:
    # bins are [e_i, e_{i+1}), the last one closed; out-of-range goes to the edge bins
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.searchsorted(edges, x, side="right") - 1
    return np.clip(idx, 0, bins - 1)


def semg_histogram(window, bins: int = DEFAULT_BINS, range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Per-bin sample counts over ``bins`` equal-width bins of ``range``."""
    lo, hi = float(range[0]), float(range[1])
    _check_range(bins, lo, hi)
    x = _as_window(window)
    return np.bincount(_bin_index(x, bins, lo, hi), minlength=bins).astype(float)


@dataclass(frozen=True)
class FeatureSet:
    """Feature vectors with their class and repetition ids."""

    vectors: np.ndarray
    labels: np.ndarray
    repetitions: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float, copy=True)
        if vectors.ndim == 1:
            vectors = vectors[:, None]
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        reps = np.array(self.repetitions, dtype=np.int64, copy=True).reshape(-1)
        if not (vectors.shape[0] == labels.shape[0] == reps.shape[0]):
            raise DomainError(
                f"feature set sizes disagree: {vectors.shape[0]} vectors, "
                f"{labels.shape[0]} labels, {reps.shape[0]} repetitions"
            )
        if not np.all(np.isfinite(vectors)):
            raise DomainError("feature vectors must be finite")
        for name, value in (("vectors", vectors), ("labels", labels), ("repetitions", reps)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def take(self, indices) -> "FeatureSet":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureSet(self.vectors[idx], self.labels[idx], self.repetitions[idx])

    def head(self, n: int) -> "FeatureSet":
        return self.take(np.arange(min(int(n), len(self))))


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-feature center and scale fitted on training items."""

    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        if center.shape != scale.shape:
            raise DomainError("center and scale shapes differ")
        if np.any(scale <= 0):
            raise DomainError("normalizer scale must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def fit(cls, values: np.ndarray) -> "FeatureNormalizer":
        """Fit on ``[n_items x ...]`` values; constant features get scale 1."""
        values = np.asarray(values, dtype=float)
        if values.shape[0] == 0:
            raise DomainError("cannot fit a normalizer on zero items")
        center = values.mean(axis=0)
        scale = values.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(center=center, scale=scale)

    @classmethod
    def identity(cls, shape: tuple[int, ...]) -> "FeatureNormalizer":
        return cls(center=np.zeros(shape), scale=np.ones(shape))

    def transform(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[1:] != self.center.shape:
            raise DomainError(
                f"normalizer fitted for shape {self.center.shape}, got items of shape {values.shape[1:]}"
            )
        return (values - self.center) / self.scale


@dataclass(frozen=True)
class HistogramRanges:
    """Per-channel histogram range, (-3 sigma, +3 sigma) of the training signal."""

    lo: np.ndarray
    hi: np.ndarray
    bins: int = DEFAULT_BINS

    @classmethod
    def fit(cls, windows: Sequence[LabeledWindow], bins: int = DEFAULT_BINS) -> "HistogramRanges":
        if not windows:
            raise DomainError("cannot fit histogram ranges on zero windows")
        channels = _channel_count(windows)
        total = np.zeros(channels)
        total_sq = np.zeros(channels)
        count = 0
        for batch in _batches(windows, channels):
            total += batch.sum(axis=(0, 1))
            total_sq += (batch**2).sum(axis=(0, 1))
            count += batch.shape[0] * batch.shape[1]
        mean = total / count
        sigma = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
        sigma = np.where(sigma > 1e-12, sigma, 1.0)
        return cls(lo=-HISTOGRAM_SIGMAS * sigma, hi=HISTOGRAM_SIGMAS * sigma, bins=bins)


def _channel_count(windows: Sequence[LabeledWindow]) -> int:
    channels = {np.shape(w.samples)[1] for w in windows}
    if len(channels) != 1:
        raise DomainError(f"windows disagree on channel count: {sorted(channels)}")
    return channels.pop()


def _batches(windows: Sequence[LabeledWindow], channels: int) -> Iterator[np.ndarray]:
    """Stack windows into ``[batch x T x channels]`` blocks."""
    for start in range(0, len(windows), _CHUNK):
        chunk = windows[start:start + _CHUNK]
        lengths = {np.shape(w.samples)[0] for w in chunk}
        if len(lengths) != 1:
            raise DomainError("windows in one feature batch must share their length")
        yield np.stack([np.asarray(w.samples, dtype=float) for w in chunk])


def time_domain_families(windows: Sequence[LabeledWindow]) -> np.ndarray:
    """Raw MAV, Var and WL per window as ``[n x 3 x channels]``."""
    if not windows:
        return np.zeros((0, 3, 0))
    channels = _channel_count(windows)
    if np.shape(windows[0].samples)[0] < 2:
        raise DomainError("windows need at least 2 samples")
    out = np.empty((len(windows), 3, channels))
    pos = 0
    for batch in _batches(windows, channels):
        n = batch.shape[0]
        out[pos:pos + n, 0] = np.abs(batch).mean(axis=1)
        out[pos:pos + n, 1] = batch.var(axis=1)
        out[pos:pos + n, 2] = np.abs(np.diff(batch, axis=1)).sum(axis=1)
        pos += n
    return out


def _meta(windows: Sequence[LabeledWindow]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.fromiter((w.class_id for w in windows), dtype=np.int64, count=len(windows))
    reps = np.fromiter((w.repetition for w in windows), dtype=np.int64, count=len(windows))
    return labels, reps


def extract_combined(
    windows: Sequence[LabeledWindow],
    normalizer: Optional[FeatureNormalizer] = None,
    *,
    normalize: bool = True,
) -> tuple[FeatureSet, FeatureNormalizer]:
    """Mean of standardized MAV, Var and WL per channel (d = channels).

    Without a ``normalizer`` one is fitted on ``windows``; pass the training
    normalizer when extracting test items. ``normalize=False`` averages the
    raw values.
    """
    families = time_domain_families(windows)
    if normalizer is None:
        shape = families.shape[1:]
        normalizer = FeatureNormalizer.fit(families) if normalize else FeatureNormalizer.identity(shape)
    standardized = normalizer.transform(families)
    labels, reps = _meta(windows)
    return FeatureSet(standardized.mean(axis=1), labels, reps), normalizer


def extract_histogram(
    windows: Sequence[LabeledWindow],
    ranges: Optional[HistogramRanges] = None,
    normalizer: Optional[FeatureNormalizer] = None,
    *,
    bins: int = DEFAULT_BINS,
    normalize: bool = True,
) -> tuple[FeatureSet, HistogramRanges, FeatureNormalizer]:
    """Per-channel sEMG histograms concatenated channel-major (d = channels * bins)."""
    if ranges is None:
        ranges = HistogramRanges.fit(windows, bins)
    channels = int(ranges.lo.shape[0])
    if windows and _channel_count(windows) != channels:
        raise DomainError(f"histogram ranges fitted for {channels} channels")
    counts = np.zeros((len(windows), channels * ranges.bins))
    pos = 0
    for batch in _batches(windows, channels) if windows else ():
        n = batch.shape[0]
        for c in range(channels):
            lo, hi = float(ranges.lo[c]), float(ranges.hi[c])
            idx = _bin_index(batch[:, :, c], ranges.bins, lo, hi)
            flat = idx + ranges.bins * np.arange(n)[:, None]
            block = np.bincount(flat.ravel(), minlength=n * ranges.bins).reshape(n, ranges.bins)
            counts[pos:pos + n, c * ranges.bins:(c + 1) * ranges.bins] = block
        pos += n
    if normalizer is None:
        normalizer = FeatureNormalizer.fit(counts) if normalize else FeatureNormalizer.identity(counts.shape[1:])
    labels, reps = _meta(windows)
    return FeatureSet(normalizer.transform(counts), labels, reps), ranges, normalizer


def save_feature_set(fs: FeatureSet, path: str | Path) -> Path:
    """CSV with columns label, repetition, f1..fd."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(fs.vectors, columns=[f"f{k}" for k in range(1, fs.dim + 1)])
    frame.insert(0, "repetition", fs.repetitions)
    frame.insert(0, "label", fs.labels)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_feature_set(path: str | Path) -> FeatureSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"feature file not found: {path}")
    frame = pd.read_csv(path)
    for required in ("label", "repetition"):
        if required not in frame.columns:
            raise SchemaError(f"{path.name}: missing column '{required}'")
    feature_cols = [c for c in frame.columns if c not in ("label", "repetition")]
    return FeatureSet(
        vectors=frame[feature_cols].to_numpy(dtype=float).reshape(len(frame), len(feature_cols)),
        labels=frame["label"].to_numpy(),
        repetitions=frame["repetition"].to_numpy(),
    )
