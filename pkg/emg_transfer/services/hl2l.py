"""Two-layer stacking over target and source confidences."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec
from emg_transfer.services.lssvm import (
    GridSpec,
    MulticlassModel,
    check_class_sets,
    decision_scores,
    grid_search,
    model_from_dict as multiclass_from_dict,
    model_to_dict as multiclass_to_dict,
    predict_batch,
    resolve_classes,
    train_multiclass,
)
from emg_transfer.services.multi_adapt import source_score_table

logger = logging.getLogger(__name__)

DEFAULT_FRACTION = 0.63


@dataclass(frozen=True)
class Hl2lModel:
    first: MulticlassModel
    sources: tuple[MulticlassModel, ...]
    second: MulticlassModel
    fraction: float

    @property
    def classes(self) -> np.ndarray:
        return self.first.classes

    @property
    def confidence_dim(self) -> int:
        return (len(self.sources) + 1) * self.first.class_count


def stratified_split_indices(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted index arrays of both parts; floor(fraction * n_g) per class go to the first."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    first, second = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.shape[0] < 2:
            raise ConfigurationError(f"class {int(cls)} has a single item and cannot populate both parts")
        take = max(int(np.floor(fraction * members.shape[0])), 1)
        shuffled = rng.permutation(members)
        first.append(shuffled[:take])
        second.append(shuffled[take:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def stratified_split(fs: FeatureSet, fraction: float, seed: int) -> tuple[FeatureSet, FeatureSet]:
    idx_a, idx_b = stratified_split_indices(fs.labels, fraction, seed)
    return fs.take(idx_a), fs.take(idx_b)


def confidence_matrix(
    target_model: MulticlassModel,
    sources: Sequence[MulticlassModel],
    X,
    *,
    source_scores: Optional[np.ndarray] = None,
) -> np.ndarray:
    """``[n x (K+1)*G]`` rows [target G | source 1 G | ... | source K G]."""
    own = decision_scores(target_model, X)
    if not sources:
        return own
    table = source_scores if source_scores is not None else source_score_table(sources, X)
    n = own.shape[0]
    return np.hstack([own, np.transpose(table, (2, 0, 1)).reshape(n, -1)])


def confidence_vector(target_model: MulticlassModel, sources: Sequence[MulticlassModel], x) -> np.ndarray:
    return confidence_matrix(target_model, sources, np.asarray(x, dtype=float).reshape(1, -1))[0]


def _second_layer(
    conf: FeatureSet,
    classes: np.ndarray,
    kind: Literal["rbf", "linear"],
    grid: Optional[GridSpec],
    folds: int,
) -> tuple[KernelSpec, float]:
    if kind == "linear":
        return KernelSpec.linear(), 1.0
    smallest = min(conf.class_counts().values())
    if grid is not None and smallest >= 2:
        found = grid_search(conf, grid, min(folds, smallest), classes=classes)
        return KernelSpec.rbf(found.gamma), found.C
    logger.debug("second layer falls back to C=1, gamma=1/dim (smallest class has %d items)", smallest)
    return KernelSpec.rbf(1.0 / conf.dim), 1.0


def hl2l_train(
    fs_train: FeatureSet,
    sources: Sequence[MulticlassModel],
    kernel_first: KernelSpec,
    C_first: float,
    *,
    kernel_second: Optional[KernelSpec] = None,
    C_second: Optional[float] = None,
    seed: int = 0,
    fraction: float = DEFAULT_FRACTION,
    second_kind: Literal["rbf", "linear"] = "rbf",
    grid: Optional[GridSpec] = None,
    folds: int = 5,
    classes: Optional[Sequence[int]] = None,
    source_scores: Optional[np.ndarray] = None,
) -> Hl2lModel:
    """First layer on the ``fraction`` part, second layer on the confidences of the rest.

    Without an explicit ``kernel_second``/``C_second`` the second layer's
    RBF parameters come from a grid search on the held-out part, when every
    class there has at least two items.
    """
    default = sources[0].classes if sources else None
    classes = resolve_classes(fs_train, classes if classes is not None else default)
    check_class_sets(sources, classes)
    if source_scores is not None and source_scores.shape[-1] != len(fs_train):
        raise DomainError(f"source score table covers {source_scores.shape[-1]} items, expected {len(fs_train)}")

    idx_a, idx_b = stratified_split_indices(fs_train.labels, fraction, seed)
    part_a, part_b = fs_train.take(idx_a), fs_train.take(idx_b)
    first = train_multiclass(part_a, kernel_first, C_first, classes=classes)

    table_b = source_scores[:, :, idx_b] if source_scores is not None else None
    conf = FeatureSet(
        confidence_matrix(first, sources, part_b.vectors, source_scores=table_b),
        part_b.labels,
        part_b.repetitions,
    )
    if kernel_second is None or C_second is None:
        kernel_second, C_second = _second_layer(conf, classes, second_kind, grid, folds)
    second = train_multiclass(conf, kernel_second, C_second, classes=classes)
    logger.debug("hl2l: first layer on %d items, second layer on %d", len(part_a), len(part_b))
    return Hl2lModel(first=first, sources=tuple(sources), second=second, fraction=fraction)


def hl2l_predict_batch(
    model: Hl2lModel,
    X,
    *,
    source_scores: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    conf = confidence_matrix(model.first, model.sources, X, source_scores=source_scores)
    return predict_batch(model.second, conf)


def hl2l_predict(model: Hl2lModel, x) -> tuple[int, np.ndarray]:
    classes, scores = hl2l_predict_batch(model, np.asarray(x, dtype=float).reshape(1, -1))
    return int(classes[0]), scores[0]


def model_to_dict(model: Hl2lModel) -> dict:
    """Both layers; sources are referenced by subject id."""
    return {
        "fraction": model.fraction,
        "sources": [src.subject_id for src in model.sources],
        "first": multiclass_to_dict(model.first),
        "second": multiclass_to_dict(model.second),
    }


def model_from_dict(data: dict, sources: dict[str, MulticlassModel]) -> Hl2lModel:
    try:
        resolved = tuple(sources[sid] for sid in data["sources"])
    except KeyError as exc:
        raise DomainError(f"model document references unknown source {exc}") from exc
    return Hl2lModel(
        first=multiclass_from_dict(data["first"]),
        sources=resolved,
        second=multiclass_from_dict(data["second"]),
        fraction=float(data["fraction"]),
    )
