"""RBF and linear kernels, Gram matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.spatial.distance import cdist

from emg_transfer.errors import ConfigurationError, DomainError

KernelKind = Literal["rbf", "linear"]


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = "rbf"
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ConfigurationError(f"unknown kernel kind '{self.kind}'")
        if self.kind == "rbf" and not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigurationError(f"rbf gamma must be positive, got {self.gamma}")

    @classmethod
    def rbf(cls, gamma: float) -> "KernelSpec":
        return cls("rbf", float(gamma))

    @classmethod
    def linear(cls) -> "KernelSpec":
        return cls("linear", 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(kind=data["kind"], gamma=float(data.get("gamma", 1.0)))


def _as_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got shape {X.shape}")
    return X


def kernel_eval(spec: KernelSpec, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x_prime = np.asarray(x_prime, dtype=float).reshape(-1)
    if x.shape != x_prime.shape:
        raise DomainError(f"dimension mismatch: {x.shape[0]} vs {x_prime.shape[0]}")
    if spec.kind == "linear":
        return float(x @ x_prime)
    diff = x - x_prime
    return float(np.exp(-spec.gamma * (diff @ diff)))


def squared_distances(X, Y) -> np.ndarray:
    """Pairwise squared euclidean distances, clipped at 0."""
    X, Y = _as_rows(X), _as_rows(Y)
    if X.shape[1] != Y.shape[1]:
        raise DomainError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return np.maximum(cdist(X, Y, metric="sqeuclidean"), 0.0)


def rbf_from_distances(sq_dist: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * sq_dist)


def gram_matrix(spec: KernelSpec, X, X_prime) -> np.ndarray:
    """Matrix with entry (i, j) = k(X_i, X'_j)."""
    X, X_prime = _as_rows(X), _as_rows(X_prime)
    if X.shape[1] != X_prime.shape[1]:
        raise DomainError(f"dimension mismatch: {X.shape[1]} vs {X_prime.shape[1]}")
    if spec.kind == "linear":
        return X @ X_prime.T
    return rbf_from_distances(squared_distances(X, X_prime), spec.gamma)
