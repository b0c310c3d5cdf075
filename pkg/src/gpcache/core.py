"""Cache-model logits: zero-shot, Nadaraya-Watson, GP-calibrated and fused.

The GP cache replaces the N-W readout ``k(f, F) Y`` with the posterior mean
``k(f, F) (K + s2 I)^-1 Y`` and divides it by the posterior variance
``1 - k(f, F) (K + s2 I)^-1 k(f, F)^T`` raised to ``eta``. With a class
partition each group of classes gets its own GP over its own keys.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .groups import GroupPartition
from .kernel import KernelParams, kernel_matrix

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
JITTER = 1e-8


class FactorizationError(RuntimeError):
    def __init__(self, group: int, msg: str):
        self.group = group
        super().__init__(f"group {group}: {msg}")


@dataclass(frozen=True)
class CacheHyper:
    alpha: float = 1.0
    beta: float = 5.5
    sigma2: float = 1.0
    eta: float = 0.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.sigma2, self.eta)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"hyperparameters must be finite: {self}")
        if self.alpha < 0 or self.sigma2 < 0 or self.eta < 0 or self.beta <= 0:
            raise ValueError(f"need alpha, sigma2, eta >= 0 and beta > 0: {self}")

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.beta)

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.sigma2, self.eta)


@dataclass(frozen=True)
class GroupSolve:
    classes: np.ndarray  # global class ids, in block column order
    rows: np.ndarray  # key rows belonging to the group
    keys: np.ndarray  # keys as seen by the kernel (calibrated if a layer is set)
    chol: np.ndarray  # lower factor of K + sigma2 I
    weights: np.ndarray  # (K + sigma2 I)^-1 Y_group
    sigma2: float  # noise actually used, including jitter


@dataclass(frozen=True)
class CacheModel:
    keys: np.ndarray
    labels: np.ndarray
    num_classes: int
    hyper: CacheHyper
    calib: object = None
    partition: GroupPartition | None = None
    solve: tuple[GroupSolve, ...] = ()

    @property
    def values(self) -> np.ndarray:
        return one_hot(self.labels, self.num_classes)

    def mapped_keys(self) -> np.ndarray:
        """Keys as the kernel sees them: re-normalized, or through the calibration layer."""
        return map_features(self.keys, self.calib)


def map_features(X: np.ndarray, calib=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if calib is not None:
        return calib.apply(X)
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def one_hot(labels: np.ndarray, c: int) -> np.ndarray:
    Y = np.zeros((labels.shape[0], c))
    Y[np.arange(labels.shape[0]), labels] = 1.0
    return Y


def _check_dim(X: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected (*, {dim}), got {X.shape}")
    return X


def factorize(K: np.ndarray, sigma2: float, group: int = 0) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``K + sigma2 I``, with one jitter retry near zero noise."""
    n = K.shape[0]
    try:
        return linalg.cholesky(K + sigma2 * np.eye(n), lower=True), sigma2
    except linalg.LinAlgError as exc:
        if sigma2 >= JITTER:
            raise FactorizationError(group, f"K + {sigma2:g} I is not positive definite") from exc
    bumped = sigma2 + JITTER
    warnings.warn(f"group {group}: kernel matrix singular at sigma2={sigma2:g}, retrying with {bumped:g}")
    try:
        return linalg.cholesky(K + bumped * np.eye(n), lower=True), bumped
    except linalg.LinAlgError as exc:
        raise FactorizationError(group, f"not positive definite even with jitter {bumped:g}") from exc


def solve_group(U: np.ndarray, Y: np.ndarray, beta: float, sigma2: float, group: int = 0):
    K = kernel_matrix(U, U, beta)
    L, s2 = factorize(K, sigma2, group)
    M = linalg.cho_solve((L, True), Y)
    return L, M, s2


def build_cache(
    F: np.ndarray,
    labels: np.ndarray,
    hyper: CacheHyper,
    calib=None,
    partition: GroupPartition | None = None,
    num_classes: int | None = None,
    solve: bool = True,
) -> CacheModel:
    """Assemble keys/values and factorize one GP system per class group.

    ``solve=False`` skips the factorizations (enough for the N-W readout).
    """
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if F.ndim != 2 or labels.shape[0] != F.shape[0]:
        raise ValueError(f"{F.shape[0]} keys but {labels.shape[0]} labels")
    if calib is not None and calib.dim != F.shape[1]:
        raise ValueError(f"calibration dim {calib.dim} != key dim {F.shape[1]}")
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    if partition is not None and partition.num_classes != c:
        raise ValueError(f"partition covers {partition.num_classes} classes, model has {c}")
    model = CacheModel(F, labels, c, hyper, calib, partition)
    if not solve:
        return model
    U = model.mapped_keys()
    groups = partition.groups if partition is not None else (tuple(range(c)),)
    solves = []
    for gi, classes in enumerate(groups):
        classes = np.asarray(classes, dtype=np.int64)
        rows = np.flatnonzero(np.isin(labels, classes))
        Yg = (labels[rows, None] == classes[None, :]).astype(np.float64)
        if rows.size == 0:
            L = np.zeros((0, 0))
            M = np.zeros((0, classes.size))
            s2 = hyper.sigma2
        else:
            L, M, s2 = solve_group(U[rows], Yg, hyper.beta, hyper.sigma2, gi)
        solves.append(GroupSolve(classes, rows, U[rows], L, M, s2))
    return CacheModel(F, labels, c, hyper, calib, partition, tuple(solves))


# ---------------------------------------------------------------------------
# logits


def zero_shot_logits(W: np.ndarray, queries: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    return _check_dim(queries, W.shape[0]) @ W


def nw_cache_logits(model: CacheModel, queries: np.ndarray) -> np.ndarray:
    Q = _check_dim(queries, model.keys.shape[1])
    Uq = Q if model.calib is None else model.calib.apply(Q)
    Kq = kernel_matrix(Uq, model.mapped_keys(), model.hyper.beta)
    return Kq @ model.values


def gp_parts(model: CacheModel, queries: np.ndarray):
    """Per group: ``(classes, posterior-mean block, variance)``."""
    if not model.solve:
        raise ValueError("model was built without solving; use build_cache(solve=True)")
    Q = _check_dim(queries, model.keys.shape[1])
    Uq = Q if model.calib is None else model.calib.apply(Q)
    parts = []
    for gs in model.solve:
        if gs.rows.size == 0:
            parts.append((gs.classes, np.zeros((Q.shape[0], gs.classes.size)), np.ones(Q.shape[0])))
            continue
        Kq = kernel_matrix(Uq, gs.keys, model.hyper.beta)
        mean = Kq @ gs.weights
        V = linalg.solve_triangular(gs.chol, Kq.T, lower=True)
        # Schur complement of a unit-diagonal kernel; clip rounding below zero
        var = np.maximum(1.0 - np.einsum("ij,ij->j", V, V), 0.0)
        parts.append((gs.classes, mean, var))
    return parts


def assemble(parts, m: int, c: int, eta: float | None = None) -> np.ndarray:
    out = np.zeros((m, c))
    for classes, mean, var in parts:
        if eta is None or eta == 0:
            out[:, classes] = mean
        else:
            out[:, classes] = mean / np.maximum(var, VARIANCE_FLOOR)[:, None] ** eta
    return out


def gp_cache_logits(model: CacheModel, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weight-calibrated cache logits and the per-group variance, shape (m, g)."""
    parts = gp_parts(model, queries)
    m = np.asarray(queries).shape[0]
    var = np.stack([p[2] for p in parts], axis=1) if parts else np.zeros((m, 0))
    return assemble(parts, m, model.num_classes), var


def confidence_calibrated_logits(model: CacheModel, queries: np.ndarray) -> np.ndarray:
    parts = gp_parts(model, queries)
    return assemble(parts, np.asarray(queries).shape[0], model.num_classes, model.hyper.eta)


def cache_logits(model: CacheModel, queries: np.ndarray, mode: str) -> np.ndarray:
    if mode == "nw":
        return nw_cache_logits(model, queries)
    if mode == "gp":
        return confidence_calibrated_logits(model, queries)
    raise ValueError(f"unknown cache mode {mode!r}")


def fused_logits(model: CacheModel, W: np.ndarray, queries: np.ndarray, mode: str = "gp") -> np.ndarray:
    zs = zero_shot_logits(W, queries)
    if mode == "zs" or model.hyper.alpha == 0:
        return zs
    return zs + model.hyper.alpha * cache_logits(model, queries, mode)


def predict(model: CacheModel, W: np.ndarray, queries: np.ndarray, mode: str = "gp") -> np.ndarray:
    """Arg-max class per query; ``np.argmax`` resolves ties to the lowest index."""
    return np.argmax(fused_logits(model, W, queries, mode), axis=1)
