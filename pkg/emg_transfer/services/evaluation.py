"""Metrics, learning curves and the per-class analyses built on them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.services import hl2l, lssvm, mkal, multi_adapt
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec
from emg_transfer.services.multi_adapt import BetaSearch
from emg_transfer.utils import to_reported_label

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.6f"
CurveOrder = Literal["stratified", "prefix", "shuffled"]


def _labels(y_true, y_pred, G: int) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise DomainError(f"length mismatch: {y_true.shape[0]} true vs {y_pred.shape[0]} predicted labels")
    if y_true.size == 0:
        raise DomainError("no labels to evaluate")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.min() < 0 or arr.max() >= G:
            raise DomainError(f"{name} labels must lie in [0, {G})")
    return y_true, y_pred


def _tally(y_true: np.ndarray, y_pred: np.ndarray, G: int) -> np.ndarray:
    """counts[p, t] = items of true class t predicted as p."""
    return np.bincount(y_pred * G + y_true, minlength=G * G).reshape(G, G)


def per_class_recall(y_true, y_pred, G: int) -> np.ndarray:
    """Recall per class; NaN for classes absent from ``y_true``."""
    y_true, y_pred = _labels(y_true, y_pred, G)
    counts = _tally(y_true, y_pred, G)
    support = counts.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(counts) / support, np.nan)


def balanced_accuracy(y_true, y_pred, G: int) -> float:
    """Macro-averaged recall over the classes present in ``y_true``."""
    return float(np.nanmean(per_class_recall(y_true, y_pred, G)))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Column-normalized G x G matrix: entry (p, t) is the share of true t predicted as p."""

    matrix: np.ndarray
    support: np.ndarray

    @property
    def class_count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def empty_columns(self) -> list[int]:
        return [int(t) for t in np.flatnonzero(self.support == 0)]


def confusion(y_true, y_pred, G: int) -> ConfusionMatrix:
    y_true, y_pred = _labels(y_true, y_pred, G)
    counts = _tally(y_true, y_pred, G).astype(float)
    support = counts.sum(axis=0)
    matrix = np.divide(counts, support[None, :], out=np.zeros_like(counts), where=support[None, :] > 0)
    return ConfusionMatrix(matrix=matrix, support=support.astype(np.int64))


Histogram = list[list[tuple[int, float]]]


def topk_histogram(cm: ConfusionMatrix, k: int) -> Histogram:
    """Per true class, the k most predicted classes sorted by share (ties by class id)."""
    G = cm.class_count
    if not 1 <= k <= G:
        raise DomainError(f"k must lie in [1, {G}], got {k}")
    out: Histogram = []
    for t in range(G):
        column = cm.matrix[:, t]
        order = np.lexsort((np.arange(G), -column))[:k]
        out.append([(int(p), float(column[p])) for p in order])
    return out


class OverlapResult(NamedTuple):
    percentage: float
    matches: int
    total: int

    def __str__(self) -> str:
        return f"{self.percentage:.1f}% ({self.matches}/{self.total})"


def overlap_percentage(hist_a: Histogram, hist_b: Histogram, threshold: int = 3) -> OverlapResult:
    """Share of classes whose top-k prediction sets have at least ``threshold`` members in common."""
    if len(hist_a) != len(hist_b) or any(len(a) != len(b) for a, b in zip(hist_a, hist_b)):
        raise DomainError("histograms differ in class count or k")
    matches = sum(
        len({p for p, _ in a} & {p for p, _ in b}) >= threshold for a, b in zip(hist_a, hist_b)
    )
    total = len(hist_a)
    return OverlapResult(100.0 * matches / total if total else 0.0, matches, total)


def class_correlation(recognition: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Pearson correlation between max-normalized per-class recognition vectors.

    NaN classes (absent from a target's test set) are left out of the pairs
    they appear in. Entries involving a constant (or all-zero) vector, or
    fewer than two shared classes, are NaN.
    """
    if len(recognition) < 2:
        raise DomainError("class correlation needs at least two settings")
    names = list(recognition)
    vectors = [np.asarray(recognition[name], dtype=float) for name in names]
    if len({v.shape for v in vectors}) != 1:
        raise DomainError("recognition vectors differ in class count")
    normalized = []
    for name, v in zip(names, vectors):
        finite = np.isfinite(v)
        peak = float(np.max(v[finite])) if finite.any() else np.nan
        if not np.isfinite(peak) or peak <= 0:
            logger.warning("setting %s has no positive recognition; correlation undefined", name)
            normalized.append(None)
            continue
        normalized.append(np.where(finite, v / peak, np.nan))

    n = len(names)
    out = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            a, b = normalized[i], normalized[j]
            if a is None or b is None:
                continue
            shared = np.isfinite(a) & np.isfinite(b)
            if shared.sum() < 2:
                continue
            a, b = a[shared], b[shared]
            da, db = a - a.mean(), b - b.mean()
            denom = np.sqrt((da @ da) * (db @ db))
            if denom == 0:
                continue
            out[i, j] = out[j, i] = 1.0 if i == j else float((da @ db) / denom)
    flagged = int(np.isnan(out).sum())
    if flagged:
        logger.warning("class correlation: %d undefined entries", flagged)
    return pd.DataFrame(out, index=names, columns=names)


@dataclass(frozen=True)
class LearningCurve:
    """Balanced accuracy per method at each training-set size."""

    steps: tuple[int, ...]
    scores: dict[str, list[float]] = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise DomainError("learning curve steps must be strictly increasing")

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"step": step, "method": method, "balanced_accuracy": values[i]}
            for method, values in self.scores.items()
            for i, step in enumerate(self.steps)
        ]
        return pd.DataFrame(rows, columns=["step", "method", "balanced_accuracy"])


@dataclass(frozen=True)
class MethodSettings:
    """Hyperparameters shared by every method of one target."""

    C: float
    gamma: float
    classes: np.ndarray
    beta_search: BetaSearch = field(default_factory=BetaSearch)
    mkal_config: mkal.MkalConfig = field(default_factory=mkal.MkalConfig)
    hl2l_fraction: float = hl2l.DEFAULT_FRACTION
    hl2l_second: Literal["rbf", "linear"] = "rbf"
    prior_mode: lssvm.PriorMode = "scores"
    grid: Optional[lssvm.GridSpec] = None
    folds: int = 5
    seed: int = 0


@dataclass
class CurveResult:
    curve: LearningCurve
    confusions: dict[tuple[str, int], ConfusionMatrix] = field(default_factory=dict)


def fit_and_predict(
    method: str,
    train: FeatureSet,
    test: FeatureSet,
    sources: Sequence[lssvm.MulticlassModel],
    settings: MethodSettings,
    *,
    train_scores: Optional[np.ndarray] = None,
    test_scores: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Train ``method`` on ``train`` and return its class predictions on ``test``.

    ``train_scores`` / ``test_scores`` are the precomputed ``[K x G x n]``
    source score tables of both sets.
    """
    rbf = KernelSpec.rbf(settings.gamma)
    classes = settings.classes
    if method == "no_transfer":
        model = lssvm.no_transfer_train(train, settings.C, settings.gamma, classes=classes)
        return lssvm.predict_batch(model, test.vectors)[0]

    def stacked(table):
        return None if table is None else np.transpose(table, (2, 0, 1)).reshape(table.shape[2], -1)

    if method == "prior_features":
        model = lssvm.prior_features_train(
            sources, train, settings.C, mode=settings.prior_mode, classes=classes,
            source_scores=stacked(train_scores),
        )
        return lssvm.prior_features_predict(model, test.vectors, source_scores=stacked(test_scores))[0]
    if method == "multi_adapt":
        model = multi_adapt.train(
            train, sources, rbf, settings.C, search=settings.beta_search, classes=classes,
            source_scores=train_scores,
        )
        return multi_adapt.predict_batch(model, test.vectors, source_scores=test_scores)[0]
    if method == "mkal":
        model = mkal.mkal_train(
            train, sources, settings.mkal_config, rbf, C=settings.C, classes=classes, source_scores=train_scores,
        )
        return mkal.mkal_predict_batch(model, test.vectors, source_scores=test_scores)[0]
    if method == "hl2l":
        model = hl2l.hl2l_train(
            train, sources, rbf, settings.C, seed=settings.seed, fraction=settings.hl2l_fraction,
            second_kind=settings.hl2l_second, grid=settings.grid, folds=settings.folds, classes=classes,
            source_scores=train_scores,
        )
        return hl2l.hl2l_predict_batch(model, test.vectors, source_scores=test_scores)[0]
    raise ConfigurationError(f"unknown method '{method}'")


def curve_order(n_items: int, order: CurveOrder, seed: int, labels=None) -> np.ndarray:
    """Pool order whose prefixes form the nested training subsets.

    ``stratified`` deals the pool out class by class: the first window of
    every class (ascending class id), then the second of every class, and so
    on, each class keeping its temporal order. Classes that run out drop out
    of the rotation.
    """
    if order == "prefix":
        return np.arange(n_items)
    if order == "shuffled":
        return np.random.default_rng(seed).permutation(n_items)
    if order == "stratified":
        if labels is None:
            raise ConfigurationError("the stratified curve order needs the pool labels")
        labels = np.asarray(labels).reshape(-1)
        if labels.shape[0] != n_items:
            raise DomainError(f"{labels.shape[0]} labels for a pool of {n_items} items")
        rank = np.empty(n_items, dtype=np.int64)
        for cls in np.unique(labels):
            members = np.flatnonzero(labels == cls)
            rank[members] = np.arange(members.shape[0])
        return np.lexsort((labels, rank))
    raise ConfigurationError(f"unknown curve order '{order}'")


def run_learning_curve(
    train_pool: FeatureSet,
    test: FeatureSet,
    sources: Sequence[lssvm.MulticlassModel],
    methods: Sequence[str],
    steps: Sequence[int],
    settings: MethodSettings,
    *,
    order: CurveOrder = "stratified",
    train_scores: Optional[np.ndarray] = None,
    test_scores: Optional[np.ndarray] = None,
) -> CurveResult:
    """Train every method on growing subsets of the pool and score it on ``test``.

    A method that cannot be trained at some step (for example a subset with a
    single class) scores NaN there.
    """
    steps = tuple(int(s) for s in steps)
    if steps and steps[-1] > len(train_pool):
        raise ConfigurationError(
            f"training pool holds {len(train_pool)} items, the largest step needs {steps[-1]} "
            f"({steps[-1] - len(train_pool)} missing)"
        )
    if sources and (train_scores is None or test_scores is None):
        train_scores = multi_adapt.source_score_table(sources, train_pool.vectors)
        test_scores = multi_adapt.source_score_table(sources, test.vectors)

    G = int(settings.classes.shape[0])
    pool_order = curve_order(len(train_pool), order, settings.seed, train_pool.labels)
    curve = LearningCurve(steps=steps, scores={m: [] for m in methods})
    result = CurveResult(curve=curve)
    for n in steps:
        idx = pool_order[:n]
        subset = train_pool.take(idx)
        subset_scores = train_scores[:, :, idx] if train_scores is not None else None
        for method in methods:
            try:
                y_pred = fit_and_predict(
                    method, subset, test, sources, settings, train_scores=subset_scores, test_scores=test_scores,
                )
            except (ConfigurationError, DomainError) as exc:
                logger.warning("%s at step %d not trainable: %s", method, n, exc)
                curve.scores[method].append(float("nan"))
                continue
            true_idx = np.searchsorted(settings.classes, test.labels)
            pred_idx = np.searchsorted(settings.classes, y_pred)
            score = balanced_accuracy(true_idx, pred_idx, G)
            curve.scores[method].append(score)
            result.confusions[(method, n)] = confusion(true_idx, pred_idx, G)
            logger.info("step %d %s: balanced accuracy %.4f", n, method, score)
    return result


def aggregate_curves(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean, best and worst target curve per method.

    ``frame`` has columns target, step, method, balanced_accuracy. Best and
    worst targets are those with the highest and lowest mean accuracy over
    all steps of that method.
    """
    rows = []
    for method, group in frame.groupby("method", sort=True):
        per_target = group.groupby("target")["balanced_accuracy"].mean().sort_index()
        best = per_target.idxmax() if per_target.notna().any() else None
        worst = per_target.idxmin() if per_target.notna().any() else None
        for step, at_step in group.groupby("step", sort=True):
            by_target = at_step.set_index("target")["balanced_accuracy"]
            rows.append(
                {
                    "step": int(step),
                    "method": method,
                    "mean": float(by_target.mean()),
                    "best": float(by_target.get(best, np.nan)) if best is not None else np.nan,
                    "worst": float(by_target.get(worst, np.nan)) if worst is not None else np.nan,
                    "best_target": best,
                    "worst_target": worst,
                }
            )
    return pd.DataFrame(
        rows, columns=["step", "method", "mean", "best", "worst", "best_target", "worst_target"]
    ).sort_values(["method", "step"], kind="stable", ignore_index=True)


def overlap_table(
    histograms: Mapping[tuple[str, int], Histogram],
    threshold: int = 3,
) -> pd.DataFrame:
    """Overlap between methods at the same step and between each step and the last one of a method."""
    rows = []
    methods = sorted({m for m, _ in histograms})
    steps = sorted({s for _, s in histograms})
    for step in steps:
        present = [m for m in methods if (m, step) in histograms]
        for i, a in enumerate(present):
            for b in present[i + 1:]:
                res = overlap_percentage(histograms[(a, step)], histograms[(b, step)], threshold)
                rows.append(("methods", a, b, step, step, res.percentage, res.matches, res.total))
    for method in methods:
        own = [s for s in steps if (method, s) in histograms]
        if len(own) < 2:
            continue
        last = own[-1]
        for step in own[:-1]:
            res = overlap_percentage(histograms[(method, step)], histograms[(method, last)], threshold)
            rows.append(("steps", method, method, step, last, res.percentage, res.matches, res.total))
    return pd.DataFrame(
        rows, columns=["kind", "method_a", "method_b", "step_a", "step_b", "percentage", "matches", "total"]
    )


def _write(frame: pd.DataFrame, path: str | Path, *, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def write_learning_curve(frame: pd.DataFrame, path: str | Path) -> Path:
    return _write(frame, path)


def write_confusion(cm: ConfusionMatrix, path: str | Path) -> Path:
    """Rows are predicted labels, columns true labels (reported 1-based)."""
    labels = [to_reported_label(g) for g in range(cm.class_count)]
    frame = pd.DataFrame(cm.matrix, index=pd.Index(labels, name="predicted"), columns=labels)
    return _write(frame, path, index=True)


def write_histogram(hist: Histogram, path: str | Path) -> Path:
    rows = [
        {"true": to_reported_label(t), "rank": rank + 1, "predicted": to_reported_label(p), "fraction": share}
        for t, entries in enumerate(hist)
        for rank, (p, share) in enumerate(entries)
    ]
    return _write(pd.DataFrame(rows, columns=["true", "rank", "predicted", "fraction"]), path)


def write_correlation(frame: pd.DataFrame, path: str | Path) -> Path:
    return _write(frame, path, index=True)
