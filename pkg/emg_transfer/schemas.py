"""Config and document schemas"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

METHODS = ("no_transfer", "prior_features", "multi_adapt", "mkal", "hl2l")
MethodName = Literal["no_transfer", "prior_features", "multi_adapt", "mkal", "hl2l"]

DEFAULT_GRID = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ColumnSchema(_Strict):
    """Column mapping of a recording CSV (one row per time sample)."""

    emg_prefix: str = "emg"
    channels: Optional[int] = Field(default=None, ge=1)
    label_column: str = "restimulus"
    repetition_column: str = "rerepetition"


class WindowingSchema(_Strict):
    window_len: int = Field(default=400, gt=0)
    shift: int = Field(default=20, gt=0)

    @model_validator(mode="after")
    def _shift_within_window(self):
        if self.shift > self.window_len:
            raise ValueError("shift must not exceed window_len")
        return self


class SplitSchema(_Strict):
    train_reps: list[int] = Field(default_factory=lambda: [1, 3, 4, 6])
    test_reps: list[int] = Field(default_factory=lambda: [2, 5])
    subsample_stride: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def _disjoint(self):
        overlap = set(self.train_reps) & set(self.test_reps)
        if overlap:
            raise ValueError(f"repetitions {sorted(overlap)} are both train and test")
        return self


class FeatureSchema(_Strict):
    kind: Literal["combined", "histogram"] = "combined"
    normalize: bool = True
    bins: int = Field(default=20, ge=1)


class GridSchema(_Strict):
    C: list[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    gamma: list[float] = Field(default_factory=lambda: list(DEFAULT_GRID))
    folds: int = Field(default=5, ge=2)

    @field_validator("C", "gamma")
    @classmethod
    def _positive(cls, values: list[float]) -> list[float]:
        if not values:
            raise ValueError("grid axis must not be empty")
        if any(v <= 0 for v in values):
            raise ValueError("grid values must be positive")
        return values


class CurveSchema(_Strict):
    steps: list[int] = Field(default_factory=lambda: list(range(120, 2161, 120)))
    order: Literal["stratified", "prefix", "shuffled"] = "stratified"

    @field_validator("steps")
    @classmethod
    def _increasing(cls, steps: list[int]) -> list[int]:
        if not steps:
            raise ValueError("at least one curve step is required")
        if any(b <= a for a, b in zip(steps, steps[1:])) or steps[0] <= 0:
            raise ValueError("curve steps must be positive and strictly increasing")
        return steps


class MultiAdaptSchema(_Strict):
    candidates: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    sweeps: int = Field(default=2, ge=1)
    beta_max: float = Field(default=4.0, gt=0)
    allow_negative: bool = False
    tie_classes: bool = False


class MkalSchema(_Strict):
    p: float = Field(default=1.5, gt=1.0, le=2.0)
    epochs: int = Field(default=5, ge=1)
    eta0: float = Field(default=1.0, gt=0)
    lam: Optional[float] = Field(default=None, gt=0)


class Hl2lSchema(_Strict):
    fraction: float = Field(default=0.63, gt=0.0, lt=1.0)
    second_kernel: Literal["rbf", "linear"] = "rbf"


class PriorFeaturesSchema(_Strict):
    mode: Literal["scores", "score_average"] = "scores"


class SubjectShiftSchema(_Strict):
    gain: list[float]
    offset: list[float]


class SyntheticCohortConfig(_Strict):
    """Synthetic cohort: shared class prototypes plus per-subject distortion."""

    subjects: list[str] = Field(default_factory=lambda: [f"s{k}" for k in range(1, 5)])
    class_count: int = Field(default=6, ge=2)
    channels: int = Field(default=8, ge=1)
    reps: int = Field(default=6, ge=1)
    movement_len: int = Field(default=1000, ge=1)
    rest_len: int = Field(default=1000, ge=1)
    sample_rate: float = Field(default=2000.0, gt=0)
    mean_scale: float = Field(default=1.0, ge=0)
    noise_low: float = Field(default=0.2, ge=0)
    noise_high: float = Field(default=1.0, ge=0)
    class_jitter: float = Field(default=0.05, ge=0)
    gain_spread: float = Field(default=0.3, ge=0, lt=1.0)
    offset_spread: float = Field(default=0.1, ge=0)
    shifts: dict[str, SubjectShiftSchema] = Field(default_factory=dict)
    seed: int = 0


class CohortConfig(_Strict):
    csv_dir: Optional[str] = None
    pattern: str = "subject_{id}.csv"
    columns: ColumnSchema = Field(default_factory=ColumnSchema)
    sample_rate: float = Field(default=2000.0, gt=0)
    synthetic: Optional[SyntheticCohortConfig] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.csv_dir is None) == (self.synthetic is None):
            raise ValueError("cohort needs exactly one of 'csv_dir' or 'synthetic'")
        return self


class ExperimentConfig(_Strict):
    """Everything a `run` needs; serialized as JSON."""

    cohort: CohortConfig
    targets: list[str]
    sources: list[str]
    leave_one_out: bool = True
    class_count: Optional[int] = Field(default=None, ge=2)
    methods: list[MethodName] = Field(default_factory=lambda: list(METHODS))
    windowing: WindowingSchema = Field(default_factory=WindowingSchema)
    split: SplitSchema = Field(default_factory=SplitSchema)
    features: FeatureSchema = Field(default_factory=FeatureSchema)
    grid: GridSchema = Field(default_factory=GridSchema)
    curve: CurveSchema = Field(default_factory=CurveSchema)
    multi_adapt: MultiAdaptSchema = Field(default_factory=MultiAdaptSchema)
    mkal: MkalSchema = Field(default_factory=MkalSchema)
    hl2l: Hl2lSchema = Field(default_factory=Hl2lSchema)
    prior_features: PriorFeaturesSchema = Field(default_factory=PriorFeaturesSchema)
    seed: int = Field(default=0, ge=0, lt=2**64)
    jobs: int = Field(default=1, ge=1)
    out_dir: str = "./results"
    cache_dir: Optional[str] = None

    @field_validator("targets", "sources")
    @classmethod
    def _unique_ids(cls, ids: list[str]) -> list[str]:
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        return ids

    @field_validator("methods")
    @classmethod
    def _methods_nonempty(cls, methods: list[str]) -> list[str]:
        if not methods:
            raise ValueError("at least one method is required")
        return list(dict.fromkeys(methods))

    @model_validator(mode="after")
    def _targets_vs_sources(self):
        if not self.targets:
            raise ValueError("at least one target subject is required")
        if not self.leave_one_out and set(self.targets) & set(self.sources):
            raise ValueError("targets and sources overlap; enable leave_one_out or make them disjoint")
        return self

    def sources_for(self, target: str) -> list[str]:
        """Source ids for one target; the target itself never counts as a source."""
        return [s for s in self.sources if s != target]


class ModelDocument(_Strict):
    """JSON envelope for serialized models."""

    type: str
    version: int = 1
    payload: dict
