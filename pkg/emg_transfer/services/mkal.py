"""Online multi-kernel learner with (2, p) group-norm regularization.

Block 0 is the target's raw feature vector under an RBF kernel; block k
(k = 1..K) is source k's score vector under a linear kernel. Training is a
stochastic subgradient pass over the multiclass hinge loss that accumulates
the dual vectors theta^k and maps them to primal block weights in closed form:

    w^k = 1 / (lam * q) * (||theta^k|| / ||theta||_{2,q}) ** (q - 2) * theta^k

with q = p / (p - 1).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.schemas import MkalSchema
from emg_transfer.services.features import FeatureSet
from emg_transfer.services.kernels import KernelSpec, gram_matrix
from emg_transfer.services.lssvm import MulticlassModel, argmax_classes, check_class_sets, resolve_classes
from emg_transfer.services.multi_adapt import source_score_table

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MkalConfig:
    p: float = 1.5
    epochs: int = 5
    eta0: float = 1.0
    lam: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not 1.0 < self.p <= 2.0:
            raise ConfigurationError(f"p must lie in (1, 2], got {self.p}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.eta0 <= 0:
            raise ConfigurationError("eta0 must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ConfigurationError("lam must be positive")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)

    @classmethod
    def from_schema(cls, schema: MkalSchema, seed: int = 0) -> "MkalConfig":
        return cls(p=schema.p, epochs=schema.epochs, eta0=schema.eta0, lam=schema.lam, seed=seed)

    def regularization(self, C: float, n_items: int) -> float:
        """lam, defaulting to 1 / (C * N)."""
        return self.lam if self.lam is not None else 1.0 / (C * n_items)


@dataclass
class MkalState:
    """Dual accumulators and derived block factors.

    ``coef`` holds block 0's dual coefficients (one row per support vector in
    ``support_X``); ``source_weights[k]`` is the G x G accumulator of source
    block k+1. ``block_factors[k]`` scales theta^k into w^k. A visit with zero
    loss leaves every field untouched; the visit count lives on the trainer.
    """

    coef: np.ndarray
    support_X: np.ndarray
    source_weights: np.ndarray
    theta_norms: np.ndarray
    block_factors: np.ndarray
    updates: int = 0

    @classmethod
    def empty(cls, support_X: np.ndarray, classes: int, sources: int) -> "MkalState":
        return cls(
            coef=np.zeros((support_X.shape[0], classes)),
            support_X=support_X,
            source_weights=np.zeros((sources, classes, classes)),
            theta_norms=np.zeros(sources + 1),
            block_factors=np.zeros(sources + 1),
        )

    def copy(self) -> "MkalState":
        return replace(
            self,
            coef=self.coef.copy(),
            source_weights=self.source_weights.copy(),
            theta_norms=self.theta_norms.copy(),
            block_factors=self.block_factors.copy(),
        )


@dataclass(frozen=True)
class MkalModel:
    state: MkalState
    classes: np.ndarray
    target_kernel: KernelSpec
    sources: tuple[MulticlassModel, ...]
    config: MkalConfig
    lam: float
    visits: int = 0

    @property
    def dim(self) -> int:
        return int(self.state.support_X.shape[1])


def group_norm(blocks: Sequence, p: float) -> float:
    """p-norm of the vector of per-block 2-norms."""
    if not 1.0 <= p <= 2.0:
        raise DomainError(f"group norm needs 1 <= p <= 2, got {p}")
    norms = np.array([np.linalg.norm(np.ravel(b)) for b in blocks])
    return float(np.sum(norms**p) ** (1.0 / p)) if norms.size else 0.0


def _q_norm(norms: np.ndarray, q: float) -> float:
    return float(np.sum(norms**q) ** (1.0 / q))


def block_weights(theta_norms: np.ndarray, q: float, lam: float) -> np.ndarray:
    """Closed-form factors f_k with w^k = f_k * theta^k; all zero for theta = 0."""
    theta_norms = np.asarray(theta_norms, dtype=float)
    total = _q_norm(theta_norms, q)
    if total == 0.0:
        return np.zeros_like(theta_norms)
    return (1.0 / (lam * q)) * (theta_norms / total) ** (q - 2.0)


def block_features(sources: Sequence[MulticlassModel], x) -> list[np.ndarray]:
    """[x, s_1(x), ..., s_K(x)] for one raw feature vector."""
    x = np.asarray(x, dtype=float).reshape(-1)
    table = source_score_table(sources, x[None, :])
    return [x] + [table[k, :, 0] for k in range(table.shape[0])]


class OnlineMkal:
    """One training run: kernel cache, source scores and the evolving state."""

    def __init__(
        self,
        X: np.ndarray,
        true_idx: np.ndarray,
        table: np.ndarray,
        classes: int,
        target_kernel: KernelSpec,
        config: MkalConfig,
        lam: float,
    ):
        self.K0 = gram_matrix(target_kernel, X, X)
        self.true_idx = np.asarray(true_idx, dtype=np.int64)
        # [N x K x G]
        self.source_vectors = np.ascontiguousarray(np.transpose(table, (2, 0, 1)))
        self.config = config
        self.lam = lam
        self.q = config.q
        self.state = MkalState.empty(np.array(X, dtype=float), classes, table.shape[0])
        # block-0 scores of every training item, K0 @ coef
        self.block0 = np.zeros((X.shape[0], classes))
        self.visits = 0

    def scores(self, i: int) -> np.ndarray:
        state = self.state
        out = state.block_factors[0] * self.block0[i]
        for k in range(state.source_weights.shape[0]):
            out = out + state.block_factors[k + 1] * (state.source_weights[k] @ self.source_vectors[i, k])
        return out

    def step(self, i: int) -> bool:
        """Process item i; returns True when the loss was positive."""
        state = self.state
        self.visits += 1
        scores = self.scores(i)
        true = int(self.true_idx[i])
        others = scores.copy()
        others[true] = -np.inf
        pred = int(np.argmax(others))
        if 1.0 - scores[true] + scores[pred] <= 0.0:
            return False

        eta = self.config.eta0 / np.sqrt(self.visits)
        state.coef[i, true] += eta
        state.coef[i, pred] -= eta
        self.block0[:, true] += eta * self.K0[:, i]
        self.block0[:, pred] -= eta * self.K0[:, i]
        state.source_weights[:, true, :] += eta * self.source_vectors[i]
        state.source_weights[:, pred, :] -= eta * self.source_vectors[i]

        state.theta_norms[0] = np.sqrt(max(float(np.sum(state.coef * self.block0)), 0.0))
        if state.source_weights.shape[0]:
            state.theta_norms[1:] = np.linalg.norm(state.source_weights, axis=(1, 2))
        state.block_factors = block_weights(state.theta_norms, self.q, self.lam)
        state.updates += 1
        return True

    def run(self) -> MkalState:
        rng = np.random.default_rng(self.config.seed)
        n = self.K0.shape[0]
        for epoch in range(self.config.epochs):
            updates = sum(self.step(int(i)) for i in rng.permutation(n))
            logger.debug("mkal epoch %d: %d/%d updates", epoch + 1, updates, n)
        return self.state


def _compact(state: MkalState) -> MkalState:
    keep = np.flatnonzero(np.any(state.coef != 0.0, axis=1))
    return replace(state, coef=state.coef[keep].copy(), support_X=state.support_X[keep].copy())


def mkal_train(
    fs_train: FeatureSet,
    sources: Sequence[MulticlassModel],
    cfg: MkalConfig,
    target_kernel: KernelSpec,
    *,
    C: float = 1.0,
    classes: Optional[Sequence[int]] = None,
    source_scores: Optional[np.ndarray] = None,
) -> MkalModel:
    """Run ``cfg.epochs`` seeded passes over the training set.

    Source blocks always use a linear kernel on the score vectors; ``C`` only
    sets the default regularization 1 / (C * N).
    """
    default = sources[0].classes if sources else None
    classes = resolve_classes(fs_train, classes if classes is not None else default)
    check_class_sets(sources, classes)
    table = source_scores if source_scores is not None else source_score_table(sources, fs_train.vectors)
    if sources and table.shape != (len(sources), classes.shape[0], len(fs_train)):
        raise DomainError(f"source score table has shape {table.shape}")
    if not sources:
        table = np.zeros((0, classes.shape[0], len(fs_train)))

    lam = cfg.regularization(C, len(fs_train))
    trainer = OnlineMkal(
        fs_train.vectors,
        np.searchsorted(classes, fs_train.labels),
        table,
        classes.shape[0],
        target_kernel,
        cfg,
        lam,
    )
    state = _compact(trainer.run())
    logger.info(
        "mkal: %d updates in %d visits, block factors %s",
        state.updates,
        trainer.visits,
        np.array2string(state.block_factors, precision=4),
    )
    return MkalModel(state, classes, target_kernel, tuple(sources), cfg, lam, visits=trainer.visits)


def mkal_scores(model: MkalModel, X, *, source_scores: Optional[np.ndarray] = None) -> np.ndarray:
    """``[n x G]`` weighted block scores."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise DomainError(f"dimension mismatch: model expects {model.dim}, got {X.shape[1]}")
    state = model.state
    scores = np.zeros((X.shape[0], model.classes.shape[0]))
    if state.coef.shape[0]:
        scores += state.block_factors[0] * (gram_matrix(model.target_kernel, X, state.support_X) @ state.coef)
    if model.sources:
        table = source_scores if source_scores is not None else source_score_table(model.sources, X)
        for k in range(len(model.sources)):
            scores += state.block_factors[k + 1] * (table[k].T @ state.source_weights[k].T)
    return scores


def mkal_predict(model: MkalModel, x) -> tuple[int, np.ndarray]:
    scores = mkal_scores(model, x)
    return int(argmax_classes(scores, model.classes)[0]), scores[0]


def mkal_predict_batch(
    model: MkalModel,
    X,
    *,
    source_scores: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    scores = mkal_scores(model, X, source_scores=source_scores)
    return argmax_classes(scores, model.classes), scores


def model_to_dict(model: MkalModel) -> dict:
    """Dual coefficients with their support vectors, config echo and seed."""
    state = model.state
    return {
        "classes": model.classes.tolist(),
        "dim": model.dim,
        "target_kernel": model.target_kernel.to_dict(),
        "sources": [src.subject_id for src in model.sources],
        "config": {
            "p": model.config.p,
            "epochs": model.config.epochs,
            "eta0": model.config.eta0,
            "lam": model.config.lam,
            "seed": model.config.seed,
        },
        "lam": model.lam,
        "visits": model.visits,
        "state": {
            "coef": state.coef.tolist(),
            "support_X": state.support_X.tolist(),
            "source_weights": state.source_weights.tolist(),
            "theta_norms": state.theta_norms.tolist(),
            "block_factors": state.block_factors.tolist(),
            "updates": state.updates,
        },
    }


def model_from_dict(data: dict, sources: dict[str, MulticlassModel]) -> MkalModel:
    try:
        resolved = tuple(sources[sid] for sid in data["sources"])
        classes = np.asarray(data["classes"], dtype=np.int64)
        G = classes.shape[0]
        raw = data["state"]
        dim = int(data["dim"])
        state = MkalState(
            coef=np.asarray(raw["coef"], dtype=float).reshape(-1, G),
            support_X=np.asarray(raw["support_X"], dtype=float).reshape(-1, dim),
            source_weights=np.asarray(raw["source_weights"], dtype=float).reshape(len(resolved), G, G),
            theta_norms=np.asarray(raw["theta_norms"], dtype=float),
            block_factors=np.asarray(raw["block_factors"], dtype=float),
            updates=int(raw["updates"]),
        )
        return MkalModel(
            state=state,
            classes=classes,
            target_kernel=KernelSpec.from_dict(data["target_kernel"]),
            sources=resolved,
            config=MkalConfig(**data["config"]),
            lam=float(data["lam"]),
            visits=int(data.get("visits", 0)),
        )
    except KeyError as exc:
        raise DomainError(f"model document references unknown key or source {exc}") from exc
