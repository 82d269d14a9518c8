"""Closed-form LS-SVM: binary, one-vs-all multiclass, grid search, baselines."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, LinAlgWarning, solve
from sklearn.metrics import recall_score
from sklearn.model_selection import StratifiedKFold

from emg_transfer.errors import ConfigurationError, DomainError, NumericError
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec, gram_matrix, rbf_from_distances, squared_distances

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-6
PriorMode = Literal["scores", "score_average"]


@dataclass(frozen=True)
class GridSpec:
    """Candidate C and gamma values (deduplicated, ascending)."""

    C: tuple[float, ...]
    gamma: tuple[float, ...]

    def __post_init__(self):
        for name in ("C", "gamma"):
            values = tuple(sorted(set(float(v) for v in getattr(self, name))))
            if not values:
                raise ConfigurationError(f"grid axis '{name}' is empty")
            if any(not np.isfinite(v) or v <= 0 for v in values):
                raise ConfigurationError(f"grid axis '{name}' must hold positive values")
            object.__setattr__(self, name, values)

    @property
    def size(self) -> int:
        return len(self.C) * len(self.gamma)

    def key(self) -> str:
        return "C=" + ",".join(repr(c) for c in self.C) + ";gamma=" + ",".join(repr(g) for g in self.gamma)


@dataclass(frozen=True)
class BinaryLssvmModel:
    alphas: np.ndarray
    bias: float
    train_X: np.ndarray
    kernel: KernelSpec
    C: float


@dataclass(frozen=True)
class MulticlassModel:
    """One-vs-all LS-SVM; row g of ``alphas`` belongs to ``classes[g]``."""

    classes: np.ndarray
    alphas: np.ndarray
    biases: np.ndarray
    train_X: np.ndarray
    kernel: KernelSpec
    C: float
    subject_id: Optional[str] = None

    @property
    def class_count(self) -> int:
        return int(self.classes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.train_X.shape[1])

    def binary(self, g: int) -> BinaryLssvmModel:
        return BinaryLssvmModel(self.alphas[g], float(self.biases[g]), self.train_X, self.kernel, self.C)

    @property
    def binary_models(self) -> list[BinaryLssvmModel]:
        return [self.binary(g) for g in range(self.class_count)]


class GridSearchResult(NamedTuple):
    C: float
    gamma: float
    table: pd.DataFrame


def bordered_matrix(K: np.ndarray, C: float) -> np.ndarray:
    """[[K + I/C, 1], [1^T, 0]]."""
    n = K.shape[0]
    A = np.empty((n + 1, n + 1))
    A[:n, :n] = K
    A[np.arange(n), np.arange(n)] += 1.0 / C
    A[:n, n] = 1.0
    A[n, :n] = 1.0
    A[n, n] = 0.0
    return A


def _condition(A: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        return float(np.linalg.cond(A))


def _solve_symmetric(A: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            sol = solve(A, rhs, assume_a="sym", check_finite=False)
        except (LinAlgError, LinAlgWarning) as exc:
            raise NumericError("bordered LS-SVM system is singular", condition=_condition(A)) from exc
    residual = np.linalg.norm(A @ sol - rhs)
    if not np.all(np.isfinite(sol)) or residual > RESIDUAL_TOLERANCE * max(np.linalg.norm(rhs), 1.0):
        raise NumericError(f"bordered LS-SVM residual too large ({residual:.3e})", condition=_condition(A))
    return sol


def solve_bordered(K: np.ndarray, C: float, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve the bordered system for one or several target columns.

    ``targets`` is ``[N]`` or ``[N x m]``; returns alphas of the same shape and
    the bias (scalar array or ``[m]``).
    """
    if C <= 0:
        raise DomainError(f"C must be positive, got {C}")
    targets = np.asarray(targets, dtype=float)
    n = K.shape[0]
    rhs = np.zeros((n + 1,) + targets.shape[1:])
    rhs[:n] = targets
    sol = _solve_symmetric(bordered_matrix(K, C), rhs)
    return sol[:n], sol[n]


def inverse_bordered(K: np.ndarray, C: float) -> np.ndarray:
    """P, the inverse of the bordered matrix."""
    A = bordered_matrix(K, C)
    return _solve_symmetric(A, np.eye(A.shape[0]))


def one_vs_all_targets(labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """``[N x G]`` matrix of +1 (own class) / -1 targets."""
    return np.where(np.asarray(labels)[:, None] == np.asarray(classes)[None, :], 1.0, -1.0)


def argmax_classes(scores: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Row-wise argmax mapped to class ids; ties go to the lowest class id."""
    return np.asarray(classes)[np.argmax(scores, axis=1)]


def _check_dim(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != dim:
        raise DomainError(f"dimension mismatch: model expects {dim}, got {X.shape[1]}")
    return X


def train_binary(X, y, kernel: KernelSpec, C: float) -> BinaryLssvmModel:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise DomainError("need N >= 1 rows with one target each")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DomainError("binary targets must be -1 or +1")
    alphas, bias = solve_bordered(gram_matrix(kernel, X, X), C, y)
    return BinaryLssvmModel(alphas=alphas, bias=float(bias), train_X=X, kernel=kernel, C=float(C))


def score(model: BinaryLssvmModel, x) -> float:
    """sum_i alpha_i k(X_i, x) + b."""
    return float(score_batch(model, x)[0])


def score_batch(model: BinaryLssvmModel, X) -> np.ndarray:
    X = _check_dim(X, model.train_X.shape[1])
    return gram_matrix(model.kernel, X, model.train_X) @ model.alphas + model.bias


def resolve_classes(fs: FeatureSet, classes: Optional[Sequence[int]]) -> np.ndarray:
    present = fs.classes
    if classes is None:
        if present.shape[0] < 2:
            raise DomainError(f"training set holds a single class ({present.tolist()})")
        return present
    classes = np.unique(np.asarray(classes, dtype=np.int64))
    unknown = np.setdiff1d(present, classes)
    if unknown.size:
        raise DomainError(f"labels {unknown.tolist()} are outside the class set {classes.tolist()}")
    if present.shape[0] < 2:
        raise DomainError(f"training set holds a single class ({present.tolist()})")
    return classes


def train_multiclass(
    fs: FeatureSet,
    kernel: KernelSpec,
    C: float,
    *,
    classes: Optional[Sequence[int]] = None,
    subject_id: Optional[str] = None,
) -> MulticlassModel:
    """One binary LS-SVM per class, all solved against the same factorization.

    ``classes`` fixes the class set (ascending); a class absent from ``fs``
    gets all -1 targets, which yields alpha = 0 and bias -1.
    """
    classes = resolve_classes(fs, classes)
    Y = one_vs_all_targets(fs.labels, classes)
    alphas, biases = solve_bordered(gram_matrix(kernel, fs.vectors, fs.vectors), C, Y)
    logger.debug("trained %d-class LS-SVM on %d items (C=%g, %s)", classes.shape[0], len(fs), C, kernel)
    return MulticlassModel(
        classes=classes,
        alphas=np.ascontiguousarray(alphas.T),
        biases=np.asarray(biases, dtype=float),
        train_X=np.array(fs.vectors),
        kernel=kernel,
        C=float(C),
        subject_id=subject_id,
    )


def decision_scores(model: MulticlassModel, X) -> np.ndarray:
    """``[n x G]`` raw per-class scores."""
    X = _check_dim(X, model.dim)
    return gram_matrix(model.kernel, X, model.train_X) @ model.alphas.T + model.biases


def predict(model: MulticlassModel, x) -> tuple[int, np.ndarray]:
    scores = decision_scores(model, x)
    return int(argmax_classes(scores, model.classes)[0]), scores[0]


def predict_batch(model: MulticlassModel, X) -> tuple[np.ndarray, np.ndarray]:
    scores = decision_scores(model, X)
    return argmax_classes(scores, model.classes), scores


def _fold_score(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    return float(
        recall_score(y_true, y_pred, labels=np.unique(y_true), average="macro", zero_division=0)
    )


def grid_search(
    fs_train: FeatureSet,
    grid: GridSpec,
    folds: int = 5,
    *,
    classes: Optional[Sequence[int]] = None,
) -> GridSearchResult:
    """Stratified k-fold search over the RBF (C, gamma) grid.

    The table holds the mean balanced accuracy per point (rows C, columns
    gamma). The best point wins; ties go to the smaller C, then the smaller
    gamma.
    """
    if folds < 2:
        raise ConfigurationError(f"folds must be >= 2, got {folds}")
    classes = resolve_classes(fs_train, classes)
    short = {c: n for c, n in fs_train.class_counts().items() if n < folds}
    if short:
        raise ConfigurationError(f"classes with fewer items than {folds} folds: {short}")

    splits = list(StratifiedKFold(n_splits=folds).split(fs_train.vectors, fs_train.labels))
    sq = squared_distances(fs_train.vectors, fs_train.vectors)
    Y = one_vs_all_targets(fs_train.labels, classes)
    table = np.full((len(grid.C), len(grid.gamma)), np.nan)

    for j, gamma in enumerate(grid.gamma):
        K = rbf_from_distances(sq, gamma)
        for i, C in enumerate(grid.C):
            scores = []
            for train_idx, val_idx in splits:
                try:
                    alphas, biases = solve_bordered(K[np.ix_(train_idx, train_idx)], C, Y[train_idx])
                except NumericError as exc:
                    logger.warning("grid point C=%g gamma=%g skipped: %s", C, gamma, exc)
                    scores = []
                    break
                fold_scores = K[np.ix_(val_idx, train_idx)] @ alphas + biases
                scores.append(_fold_score(fs_train.labels[val_idx], argmax_classes(fold_scores, classes)))
            if scores:
                table[i, j] = float(np.mean(scores))

    if not np.any(np.isfinite(table)):
        raise NumericError("every grid point failed to train")
    best = np.nanmax(table)
    i, j = next((i, j) for i in range(table.shape[0]) for j in range(table.shape[1]) if table[i, j] == best)
    frame = pd.DataFrame(table, index=pd.Index(grid.C, name="C"), columns=pd.Index(grid.gamma, name="gamma"))
    logger.info("grid search: C=%g gamma=%g (balanced accuracy %.4f)", grid.C[i], grid.gamma[j], best)
    return GridSearchResult(C=grid.C[i], gamma=grid.gamma[j], table=frame)


def no_transfer_train(
    fs: FeatureSet,
    C: float,
    gamma: float,
    *,
    classes: Optional[Sequence[int]] = None,
) -> MulticlassModel:
    """Target-only RBF LS-SVM baseline."""
    return train_multiclass(fs, KernelSpec.rbf(gamma), C, classes=classes)


def check_class_sets(sources: Sequence[MulticlassModel], classes: np.ndarray) -> None:
    for src in sources:
        if not np.array_equal(src.classes, classes):
            raise DomainError(
                f"source {src.subject_id or '?'} classes {src.classes.tolist()} "
                f"differ from target classes {np.asarray(classes).tolist()}"
            )


def stack_source_scores(sources: Sequence[MulticlassModel], X) -> np.ndarray:
    """``[n x K*G]`` concatenation of every source's score vector."""
    if not sources:
        return np.zeros((np.atleast_2d(X).shape[0], 0))
    return np.hstack([decision_scores(src, X) for src in sources])


@dataclass(frozen=True)
class PriorFeaturesModel:
    """Linear LS-SVM over concatenated source scores (or their plain average)."""

    sources: tuple[MulticlassModel, ...]
    classes: np.ndarray
    mode: PriorMode = "scores"
    stacked: Optional[MulticlassModel] = None


def prior_features_train(
    source_models: Sequence[MulticlassModel],
    fs_target_train: FeatureSet,
    C: float,
    *,
    mode: PriorMode = "scores",
    classes: Optional[Sequence[int]] = None,
    source_scores: Optional[np.ndarray] = None,
) -> PriorFeaturesModel:
    """Train on the target's source-score features.

    ``source_scores`` may pass the precomputed ``[n x K*G]`` stack for
    ``fs_target_train``. ``mode="score_average"`` skips target training and
    predicts from the mean source score vector.
    """
    if not source_models:
        raise DomainError("prior features need at least one source model")
    classes = resolve_classes(fs_target_train, classes if classes is not None else source_models[0].classes)
    check_class_sets(source_models, classes)
    if mode == "score_average":
        return PriorFeaturesModel(tuple(source_models), classes, mode)
    if mode != "scores":
        raise ConfigurationError(f"unknown prior features mode '{mode}'")
    if source_scores is None:
        source_scores = stack_source_scores(source_models, fs_target_train.vectors)
    stacked_fs = FeatureSet(source_scores, fs_target_train.labels, fs_target_train.repetitions)
    stacked = train_multiclass(stacked_fs, KernelSpec.linear(), C, classes=classes)
    return PriorFeaturesModel(tuple(source_models), classes, mode, stacked)


def prior_features_predict(
    model: PriorFeaturesModel,
    X,
    *,
    source_scores: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Class ids and ``[n x G]`` scores for a batch of raw target vectors."""
    if source_scores is None:
        source_scores = stack_source_scores(model.sources, X)
    if model.mode == "score_average":
        G = model.classes.shape[0]
        scores = source_scores.reshape(source_scores.shape[0], len(model.sources), G).mean(axis=1)
        return argmax_classes(scores, model.classes), scores
    return predict_batch(model.stacked, source_scores)


def model_to_dict(model: MulticlassModel) -> dict:
    """JSON-ready structure: kernel, per-class alpha and bias, training matrix."""
    return {
        "subject_id": model.subject_id,
        "kernel": model.kernel.to_dict(),
        "C": model.C,
        "classes": model.classes.tolist(),
        "alphas": model.alphas.tolist(),
        "biases": model.biases.tolist(),
        "train_X": model.train_X.tolist(),
    }


def model_from_dict(data: dict) -> MulticlassModel:
    try:
        train_X = np.asarray(data["train_X"], dtype=float)
        classes = np.asarray(data["classes"], dtype=np.int64)
        alphas = np.asarray(data["alphas"], dtype=float).reshape(classes.shape[0], train_X.shape[0])
        return MulticlassModel(
            classes=classes,
            alphas=alphas,
            biases=np.asarray(data["biases"], dtype=float),
            train_X=train_X,
            kernel=KernelSpec.from_dict(data["kernel"]),
            C=float(data["C"]),
            subject_id=data.get("subject_id"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed model document: {exc}") from exc
