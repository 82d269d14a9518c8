"""Multi-Adapt: LS-SVM biased towards a per-class weighted sum of source models.

Each class g solves the bordered system with right-hand side
``y_g - sum_k B[k, g] * yhat_k,g``; the weights B are chosen by minimizing the
closed-form leave-one-out multiclass hinge loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.schemas import MultiAdaptSchema
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec, gram_matrix
from emg_transfer.services.lssvm import (
    MulticlassModel,
    argmax_classes,
    check_class_sets,
    decision_scores,
    inverse_bordered,
    one_vs_all_targets,
    resolve_classes,
    solve_bordered,
)

logger = logging.getLogger(__name__)

_IMPROVEMENT = 1e-12


@dataclass(frozen=True)
class BetaMatrix:
    """K x G transfer weights, row k = source k, column g = class g."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise DomainError(f"beta matrix must be K x G, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("beta weights must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, sources: int, classes: int) -> "BetaMatrix":
        return cls(np.zeros((sources, classes)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class BetaSearch:
    """Coordinate search settings for the transfer weights."""

    candidates: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    sweeps: int = 2
    beta_max: float = 4.0
    allow_negative: bool = False
    tie_classes: bool = False

    def __post_init__(self):
        if self.sweeps < 1:
            raise ConfigurationError("sweeps must be >= 1")
        if self.beta_max <= 0:
            raise ConfigurationError("beta_max must be positive")

    @classmethod
    def from_schema(cls, schema: MultiAdaptSchema) -> "BetaSearch":
        return cls(
            candidates=tuple(schema.candidates),
            sweeps=schema.sweeps,
            beta_max=schema.beta_max,
            allow_negative=schema.allow_negative,
            tie_classes=schema.tie_classes,
        )

    def grid(self) -> np.ndarray:
        """Sorted candidate values inside the box; 0 is always present."""
        values = {0.0, *(float(v) for v in self.candidates)}
        if self.allow_negative:
            values |= {-v for v in values}
        lo = -self.beta_max if self.allow_negative else 0.0
        return np.array(sorted(v for v in values if lo <= v <= self.beta_max))


@dataclass(frozen=True)
class MultiAdaptModel:
    classes: np.ndarray
    alphas: np.ndarray
    biases: np.ndarray
    beta: BetaMatrix
    sources: tuple[MulticlassModel, ...]
    train_X: np.ndarray
    kernel: KernelSpec
    C: float

    @property
    def dim(self) -> int:
        return int(self.train_X.shape[1])


class LooComponents(NamedTuple):
    alpha_prime: np.ndarray
    alpha_second: np.ndarray
    p_diag: np.ndarray


def source_score_table(sources: Sequence[MulticlassModel], X) -> np.ndarray:
    """``[K x G x N]`` raw scores of source k for class g on item i."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not sources:
        return np.zeros((0, 0, X.shape[0]))
    return np.stack([decision_scores(src, X).T for src in sources])


def loo_components(K_matrix: np.ndarray, y_pm, yhat_combo, C: float) -> LooComponents:
    """alpha' = P[y; 0], alpha'' = P[-yhat; 0] and diag(P) over the N items.

    With ``alpha = alpha' + beta * alpha''`` the leave-one-out prediction of
    item i is ``y_i - (alpha'_i + beta * alpha''_i) / P_ii``.
    """
    n = K_matrix.shape[0]
    P = inverse_bordered(K_matrix, C)[:n, :n]
    y_pm = np.asarray(y_pm, dtype=float)
    yhat_combo = np.asarray(yhat_combo, dtype=float)
    return LooComponents(P @ y_pm, P @ -yhat_combo, np.diag(P).copy())


def multiclass_hinge(scores: np.ndarray, true_idx: np.ndarray) -> np.ndarray:
    """max(0, 1 - s_true + max_{g != true} s_g) per row."""
    rows = np.arange(scores.shape[0])
    true_scores = scores[rows, true_idx]
    others = scores.copy()
    others[rows, true_idx] = -np.inf
    return np.maximum(0.0, 1.0 - true_scores + others.max(axis=1))


class _LooProblem:
    """Leave-one-out predictions as an affine function of B."""

    def __init__(self, K_matrix: np.ndarray, Y: np.ndarray, table: np.ndarray, C: float):
        n = K_matrix.shape[0]
        P = inverse_bordered(K_matrix, C)[:n, :n]
        self.p_diag = np.diag(P).copy()
        self.Y = Y
        self.base = P @ Y
        # second[k] = P @ (-yhat_k), [N x G]
        self.second = np.zeros((table.shape[0],) + Y.shape)
        for k in range(table.shape[0]):
            self.second[k] = P @ -table[k].T

    def predictions(self, beta: np.ndarray) -> np.ndarray:
        combo = self.base + np.einsum("kg,kng->ng", beta, self.second)
        return self.Y - combo / self.p_diag[:, None]


def loo_predictions(
    K_matrix: np.ndarray,
    Y: np.ndarray,
    table: np.ndarray,
    beta: BetaMatrix,
    C: float,
) -> np.ndarray:
    """``[N x G]`` closed-form leave-one-out predictions for weights ``beta``."""
    return _LooProblem(K_matrix, np.asarray(Y, dtype=float), table, C).predictions(beta.values)


def _prepare(fs_train, sources, classes, source_scores):
    if not sources:
        raise DomainError("Multi-Adapt needs at least one source model")
    classes = resolve_classes(fs_train, classes if classes is not None else sources[0].classes)
    check_class_sets(sources, classes)
    table = source_scores if source_scores is not None else source_score_table(sources, fs_train.vectors)
    expected = (len(sources), classes.shape[0], len(fs_train))
    if table.shape != expected:
        raise DomainError(f"source score table has shape {table.shape}, expected {expected}")
    return classes, table


def _search(problem: _LooProblem, true_idx: np.ndarray, shape: tuple[int, int], search: BetaSearch) -> np.ndarray:
    grid = search.grid()
    beta = np.zeros(shape)
    current = problem.predictions(beta)
    loss = float(multiclass_hinge(current, true_idx).mean())
    zero_loss = loss
    K, G = shape
    cells = [(k, None) for k in range(K)] if search.tie_classes else [(k, g) for k in range(K) for g in range(G)]

    for sweep in range(search.sweeps):
        moved = False
        for k, g in cells:
            cols = slice(None) if g is None else slice(g, g + 1)
            old = beta[k, 0] if g is None else beta[k, g]
            step = problem.second[k][:, cols] / problem.p_diag[:, None]
            best_value, best_loss, best_pred = old, loss, None
            for value in grid:
                if value == old:
                    continue
                trial = current.copy()
                trial[:, cols] -= (value - old) * step
                trial_loss = float(multiclass_hinge(trial, true_idx).mean())
                if trial_loss < best_loss - _IMPROVEMENT:
                    best_value, best_loss, best_pred = value, trial_loss, trial
            if best_pred is not None:
                beta[k, cols] = best_value
                current, loss = best_pred, best_loss
                moved = True
        logger.debug("beta sweep %d: loo hinge %.6f", sweep + 1, loss)
        if not moved:
            break
    logger.info("beta search: loo hinge %.4f (zero transfer %.4f)", loss, zero_loss)
    return beta


def optimize_beta(
    fs_train: FeatureSet,
    sources: Sequence[MulticlassModel],
    kernel: KernelSpec,
    C: float,
    *,
    search: Optional[BetaSearch] = None,
    classes: Optional[Sequence[int]] = None,
    source_scores: Optional[np.ndarray] = None,
) -> BetaMatrix:
    """Coordinate descent on the leave-one-out multiclass hinge loss.

    Starts from B = 0 and only accepts strict improvements, so the result is
    never worse than zero transfer.
    """
    search = search or BetaSearch()
    classes, table = _prepare(fs_train, sources, classes, source_scores)
    K_matrix = gram_matrix(kernel, fs_train.vectors, fs_train.vectors)
    return _optimize(fs_train, classes, table, K_matrix, C, search)


def _optimize(fs_train, classes, table, K_matrix, C, search) -> BetaMatrix:
    Y = one_vs_all_targets(fs_train.labels, classes)
    true_idx = np.searchsorted(classes, fs_train.labels)
    problem = _LooProblem(K_matrix, Y, table, C)
    return BetaMatrix(_search(problem, true_idx, (table.shape[0], classes.shape[0]), search))


def train(
    fs_train: FeatureSet,
    sources: Sequence[MulticlassModel],
    kernel: KernelSpec,
    C: float,
    *,
    search: Optional[BetaSearch] = None,
    beta: Optional[BetaMatrix] = None,
    classes: Optional[Sequence[int]] = None,
    source_scores: Optional[np.ndarray] = None,
) -> MultiAdaptModel:
    """Fit the adapted model; ``beta`` skips the weight search when given."""
    classes, table = _prepare(fs_train, sources, classes, source_scores)
    K_matrix = gram_matrix(kernel, fs_train.vectors, fs_train.vectors)
    if beta is None:
        beta = _optimize(fs_train, classes, table, K_matrix, C, search or BetaSearch())
    elif beta.shape != (len(sources), classes.shape[0]):
        raise DomainError(f"beta has shape {beta.shape}, expected {(len(sources), classes.shape[0])}")

    Y = one_vs_all_targets(fs_train.labels, classes)
    prior = np.einsum("kg,kgn->ng", beta.values, table)
    alphas, biases = solve_bordered(K_matrix, C, Y - prior)
    return MultiAdaptModel(
        classes=classes,
        alphas=np.ascontiguousarray(alphas.T),
        biases=np.asarray(biases, dtype=float),
        beta=beta,
        sources=tuple(sources),
        train_X=np.array(fs_train.vectors),
        kernel=kernel,
        C=float(C),
    )


def decision_scores_adapted(model: MultiAdaptModel, X, *, source_scores: Optional[np.ndarray] = None) -> np.ndarray:
    """``[n x G]`` scores: kernel expansion + bias + sum_k B[k, g] * source score."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise DomainError(f"dimension mismatch: model expects {model.dim}, got {X.shape[1]}")
    own = gram_matrix(model.kernel, X, model.train_X) @ model.alphas.T + model.biases
    table = source_scores if source_scores is not None else source_score_table(model.sources, X)
    if table.shape[0] == 0:
        return own
    return own + np.einsum("kg,kgn->ng", model.beta.values, table)


def predict(model: MultiAdaptModel, x) -> tuple[int, np.ndarray]:
    scores = decision_scores_adapted(model, x)
    return int(argmax_classes(scores, model.classes)[0]), scores[0]


def predict_batch(
    model: MultiAdaptModel,
    X,
    *,
    source_scores: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    scores = decision_scores_adapted(model, X, source_scores=source_scores)
    return argmax_classes(scores, model.classes), scores


def model_to_dict(model: MultiAdaptModel) -> dict:
    """JSON-ready structure; sources are referenced by subject id."""
    return {
        "kernel": model.kernel.to_dict(),
        "C": model.C,
        "classes": model.classes.tolist(),
        "alphas": model.alphas.tolist(),
        "biases": model.biases.tolist(),
        "beta": model.beta.values.tolist(),
        "sources": [src.subject_id for src in model.sources],
        "train_X": model.train_X.tolist(),
    }


def model_from_dict(data: dict, sources: dict[str, MulticlassModel]) -> MultiAdaptModel:
    try:
        resolved = tuple(sources[sid] for sid in data["sources"])
        train_X = np.asarray(data["train_X"], dtype=float)
        classes = np.asarray(data["classes"], dtype=np.int64)
        return MultiAdaptModel(
            classes=classes,
            alphas=np.asarray(data["alphas"], dtype=float).reshape(classes.shape[0], train_X.shape[0]),
            biases=np.asarray(data["biases"], dtype=float),
            beta=BetaMatrix(np.asarray(data["beta"], dtype=float).reshape(len(resolved), classes.shape[0])),
            sources=resolved,
            train_X=train_X,
            kernel=KernelSpec.from_dict(data["kernel"]),
            C=float(data["C"]),
        )
    except KeyError as exc:
        raise DomainError(f"model document references unknown key or source {exc}") from exc
