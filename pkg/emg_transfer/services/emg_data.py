"""Recordings: CSV ingestion, synthetic subjects, segmentation and windowing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, TypeVar

import numpy as np
import pandas as pd

from emg_transfer.errors import ConfigurationError, DataError, DomainError, ParseError, SchemaError
from emg_transfer.schemas import ColumnSchema, SyntheticCohortConfig
from emg_transfer.utils import REST_LABEL, derive_seed

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 2000.0
_PARSER_LINE = re.compile(r"line (\d+)")

T = TypeVar("T")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Recording:
    """Multichannel signal with per-sample class label and repetition index."""

    samples: np.ndarray
    labels: np.ndarray
    repetitions: np.ndarray
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise DomainError(f"samples must be [time x channels], got shape {samples.shape}")
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        reps = np.asarray(self.repetitions).astype(np.int64).reshape(-1)
        if not (samples.shape[0] == labels.shape[0] == reps.shape[0]):
            raise DomainError(
                "samples, labels and repetitions must share the time length "
                f"({samples.shape[0]}, {labels.shape[0]}, {reps.shape[0]})"
            )
        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "repetitions", _frozen(reps))

    @property
    def channels(self) -> int:
        return int(self.samples.shape[1])

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])

    def structure_warnings(self) -> list[str]:
        """Movement runs that are not bracketed by rest runs."""
        runs = _runs(self.labels)
        problems = []
        for idx, (start, stop) in enumerate(runs):
            label = int(self.labels[start])
            if label == REST_LABEL:
                continue
            before = int(self.labels[runs[idx - 1][0]]) if idx > 0 else None
            after = int(self.labels[runs[idx + 1][0]]) if idx + 1 < len(runs) else None
            if before != REST_LABEL or after != REST_LABEL:
                problems.append(f"movement {label} at samples {start}..{stop - 1} is not bracketed by rest")
        return problems


@dataclass(frozen=True)
class Segment:
    """Maximal constant-label run of a recording."""

    class_id: int
    repetition: int
    samples: np.ndarray
    start: int = 0

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])


@dataclass(frozen=True)
class WindowingConfig:
    window_len: int = 400
    shift: int = 20

    def __post_init__(self):
        if self.window_len <= 0:
            raise ConfigurationError(f"window_len must be positive, got {self.window_len}")
        if not 0 < self.shift <= self.window_len:
            raise ConfigurationError(
                f"shift must satisfy 0 < shift <= window_len, got {self.shift} (window {self.window_len})"
            )


class LabeledWindow(NamedTuple):
    samples: np.ndarray
    class_id: int
    repetition: int


@dataclass(frozen=True)
class SubjectShift:
    """Per-channel affine distortion separating one subject from another."""

    gain: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        gain = np.asarray(self.gain, dtype=float).reshape(-1)
        offset = np.asarray(self.offset, dtype=float).reshape(-1)
        if gain.shape != offset.shape:
            raise ConfigurationError("gain and offset need one value per channel")
        if np.any(gain <= 0):
            raise ConfigurationError("subject gains must be positive")
        object.__setattr__(self, "gain", _frozen(gain))
        object.__setattr__(self, "offset", _frozen(offset))

    @classmethod
    def identity(cls, channels: int) -> "SubjectShift":
        return cls(gain=np.ones(channels), offset=np.zeros(channels))


@dataclass(frozen=True)
class SyntheticSubjectSpec:
    """Generative description of one synthetic subject.

    ``means`` and ``noise`` are ``[(class_count + 1) x channels]`` tables whose
    row 0 describes rest; rows ``1..class_count`` describe the movements.
    """

    class_count: int
    channels: int
    means: np.ndarray
    noise: np.ndarray
    shift: Optional[SubjectShift] = None
    seed: int = 0
    sample_rate: float = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigurationError(f"class_count must be >= 2, got {self.class_count}")
        shape = (self.class_count + 1, self.channels)
        means = np.broadcast_to(np.asarray(self.means, dtype=float), shape)
        noise = np.broadcast_to(np.asarray(self.noise, dtype=float), shape)
        if np.any(noise < 0):
            raise ConfigurationError("noise levels must be non-negative")
        shift = self.shift or SubjectShift.identity(self.channels)
        if shift.gain.shape[0] != self.channels:
            raise ConfigurationError("subject shift must have one gain per channel")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "noise", _frozen(noise))
        object.__setattr__(self, "shift", shift)


def _runs(labels: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) bounds of maximal constant runs."""
    n = int(labels.shape[0])
    if n == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate(([0], cuts))
    stops = np.concatenate((cuts, [n]))
    return [(int(a), int(b)) for a, b in zip(starts, stops)]


def _parser_error_line(exc: Exception) -> Optional[int]:
    match = _PARSER_LINE.search(str(exc))
    return int(match.group(1)) if match else None


def _emg_columns(columns: Sequence[str], schema: ColumnSchema) -> list[str]:
    pattern = re.compile(rf"^{re.escape(schema.emg_prefix)}(\d+)$")
    found = sorted(
        ((int(m.group(1)), col) for col in columns if (m := pattern.match(col.strip()))),
    )
    return [col for _, col in found]


def load_recording(
    path: str | Path,
    schema: Optional[ColumnSchema] = None,
    *,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
) -> Recording:
    """Read one subject's CSV export (one row per time sample).

    Labels come from the a-posteriori stimulus column, repetitions from the
    repetition column; the channel count is inferred from the ``emg<k>``
    columns unless the schema pins it.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"recording not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty", line=1) from exc
    except pd.errors.ParserError as exc:
        raise ParseError(f"ragged row: {exc}", line=_parser_error_line(exc)) from exc
    frame.columns = [str(c).strip() for c in frame.columns]

    for required in (schema.label_column, schema.repetition_column):
        if required not in frame.columns:
            raise SchemaError(f"{path.name}: missing column '{required}'")
    emg_cols = _emg_columns(list(frame.columns), schema)
    if not emg_cols:
        raise SchemaError(f"{path.name}: no '{schema.emg_prefix}<k>' columns")
    if schema.channels is not None:
        expected = [f"{schema.emg_prefix}{k}" for k in range(1, schema.channels + 1)]
        if emg_cols != expected:
            raise SchemaError(
                f"{path.name}: schema declares {schema.channels} emg channels, file has {len(emg_cols)}"
            )

    used = emg_cols + [schema.label_column, schema.repetition_column]
    missing = frame[used].isna() | (frame[used] == "")
    if missing.to_numpy().any():
        row = int(np.flatnonzero(missing.to_numpy().any(axis=1))[0])
        raise ParseError("ragged row: too few fields", line=row + 2)

    numeric = frame[used].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = (int(v[0]) for v in np.nonzero(bad))
        raise ParseError(f"non-numeric value in column '{used[col]}'", line=row + 2)

    samples = numeric[emg_cols].to_numpy(dtype=float)
    label_values = numeric[[schema.label_column, schema.repetition_column]].to_numpy(dtype=float)
    integral = np.isfinite(label_values) & (label_values == np.round(label_values))
    if not integral.all():
        row, col = (int(v[0]) for v in np.nonzero(~integral))
        name = (schema.label_column, schema.repetition_column)[col]
        raise ParseError(f"non-integer value in column '{name}'", line=row + 2)

    rec = Recording(
        samples=samples,
        labels=label_values[:, 0].astype(np.int64),
        repetitions=label_values[:, 1].astype(np.int64),
        sample_rate=sample_rate,
    )
    for problem in rec.structure_warnings():
        logger.warning("%s: %s", path.name, problem)
    logger.debug("loaded %s: %d samples x %d channels", path.name, rec.length, rec.channels)
    return rec


def save_recording(rec: Recording, path: str | Path, schema: Optional[ColumnSchema] = None) -> Path:
    """Write a recording with the CSV layout :func:`load_recording` reads."""
    schema = schema or ColumnSchema()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        rec.samples, columns=[f"{schema.emg_prefix}{k}" for k in range(1, rec.channels + 1)]
    )
    frame[schema.label_column] = rec.labels
    frame[schema.repetition_column] = rec.repetitions
    frame.to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    return path


def generate_synthetic_recording(
    spec: SyntheticSubjectSpec,
    reps: int,
    movement_len: int,
    rest_len: int,
) -> Recording:
    """Alternating rest/movement recording; every class appears ``reps`` times.

    Each run draws ``mean + noise * N(0, 1)`` per channel, then the subject's
    affine shift ``gain * x + offset`` is applied. The rest run before a
    movement carries that movement's repetition index; the closing rest run
    carries the last one.
    """
    if reps < 1:
        raise ConfigurationError(f"reps must be >= 1, got {reps}")
    if movement_len < 1 or rest_len < 1:
        raise ConfigurationError("movement_len and rest_len must be >= 1")

    rng = np.random.default_rng(spec.seed)
    plan: list[tuple[int, int, int]] = []
    for rep in range(1, reps + 1):
        for cls in range(1, spec.class_count + 1):
            plan.append((REST_LABEL, rep, rest_len))
            plan.append((cls, rep, movement_len))
    plan.append((REST_LABEL, reps, rest_len))

    total = sum(n for _, _, n in plan)
    eps = rng.standard_normal((total, spec.channels))
    labels = np.empty(total, dtype=np.int64)
    repetitions = np.empty(total, dtype=np.int64)
    base = np.empty((total, spec.channels))
    pos = 0
    for cls, rep, n in plan:
        sl = slice(pos, pos + n)
        base[sl] = spec.means[cls] + spec.noise[cls] * eps[sl]
        labels[sl] = cls
        repetitions[sl] = rep
        pos += n

    samples = base * spec.shift.gain + spec.shift.offset
    return Recording(samples=samples, labels=labels, repetitions=repetitions, sample_rate=spec.sample_rate)


def segment_by_label(rec: Recording) -> list[Segment]:
    """One segment per maximal constant-label run, rest included.

    A rest run whose repetition column is 0 (NinaPro convention) takes the
    repetition of the next movement run, or of the previous one at the end.
    """
    runs = _runs(rec.labels)
    segments = [
        Segment(
            class_id=int(rec.labels[start]),
            repetition=int(rec.repetitions[start]),
            samples=rec.samples[start:stop],
            start=start,
        )
        for start, stop in runs
    ]
    for idx, seg in enumerate(segments):
        if seg.repetition != 0:
            continue
        donor = next((s for s in segments[idx + 1:] if s.repetition != 0), None)
        if donor is None:
            donor = next((s for s in reversed(segments[:idx]) if s.repetition != 0), None)
        if donor is not None:
            segments[idx] = Segment(seg.class_id, donor.repetition, seg.samples, seg.start)
    return segments


def window_count(length: int, cfg: WindowingConfig) -> int:
    if length < cfg.window_len:
        return 0
    return (length - cfg.window_len) // cfg.shift + 1


def window_segment(seg: Segment, cfg: WindowingConfig) -> list[LabeledWindow]:
    """Sliding windows at offsets 0, shift, 2*shift, ... inside one segment."""
    count = window_count(seg.length, cfg)
    if count == 0:
        return []
    views = np.lib.stride_tricks.sliding_window_view(seg.samples, cfg.window_len, axis=0)
    # views: [offset x channels x window_len]
    return [
        LabeledWindow(views[k * cfg.shift].T, seg.class_id, seg.repetition)
        for k in range(count)
    ]


def window_recording(rec: Recording, cfg: WindowingConfig) -> list[LabeledWindow]:
    """Segment then window, keeping temporal order."""
    windows: list[LabeledWindow] = []
    for seg in segment_by_label(rec):
        windows.extend(window_segment(seg, cfg))
    return windows


def split_by_repetition(
    items: Iterable[T],
    train_reps: Iterable[int],
    test_reps: Iterable[int],
) -> tuple[list[T], list[T]]:
    """Route items by their ``repetition``; items in neither set are dropped."""
    train_set, test_set = set(int(r) for r in train_reps), set(int(r) for r in test_reps)
    overlap = train_set & test_set
    if overlap:
        raise ConfigurationError(f"repetitions {sorted(overlap)} are both train and test")
    train: list[T] = []
    test: list[T] = []
    for item in items:
        rep = int(item.repetition)
        if rep in train_set:
            train.append(item)
        elif rep in test_set:
            test.append(item)
    return train, test


def subsample(items: Sequence[T], stride: int) -> list[T]:
    """Keep items at indices 0, stride, 2*stride, ..."""
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    return list(items[::stride])


@dataclass(frozen=True)
class PreparedWindows:
    """Train/test windows of one subject after splitting and subsampling."""

    train: list[LabeledWindow] = field(default_factory=list)
    test: list[LabeledWindow] = field(default_factory=list)


def generate_synthetic_cohort(cfg: SyntheticCohortConfig) -> dict[str, SyntheticSubjectSpec]:
    """Per-subject specs sharing class prototypes.

    Every subject jitters the prototype means and noise levels of each class
    and adds its own per-channel gain and offset (explicit ``shifts`` win).
    Rest keeps a zero mean and the lowest noise level.
    """
    rows = cfg.class_count + 1
    rng = np.random.default_rng(cfg.seed)
    proto_means = cfg.mean_scale * rng.uniform(-1.0, 1.0, (rows, cfg.channels))
    proto_noise = rng.uniform(cfg.noise_low, cfg.noise_high, (rows, cfg.channels))
    proto_means[REST_LABEL] = 0.0
    proto_noise[REST_LABEL] = cfg.noise_low

    specs: dict[str, SyntheticSubjectSpec] = {}
    for subject in cfg.subjects:
        srng = np.random.default_rng(derive_seed(cfg.seed, subject))
        means = proto_means + cfg.class_jitter * cfg.mean_scale * srng.standard_normal(proto_means.shape)
        noise = proto_noise * np.exp(0.5 * cfg.class_jitter * srng.standard_normal(proto_noise.shape))
        means[REST_LABEL] = 0.0
        if subject in cfg.shifts:
            shift = SubjectShift(cfg.shifts[subject].gain, cfg.shifts[subject].offset)
        else:
            shift = SubjectShift(
                gain=1.0 + srng.uniform(-cfg.gain_spread, cfg.gain_spread, cfg.channels),
                offset=srng.uniform(-cfg.offset_spread, cfg.offset_spread, cfg.channels),
            )
        specs[subject] = SyntheticSubjectSpec(
            class_count=cfg.class_count,
            channels=cfg.channels,
            means=means,
            noise=noise,
            shift=shift,
            seed=derive_seed(cfg.seed, subject, "signal"),
            sample_rate=cfg.sample_rate,
        )
    return specs
