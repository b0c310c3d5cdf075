"""Cheaper stand-ins for the exact GP cache and a timing benchmark.

Besides class groups (see :mod:`gpcache.groups`) this covers random Fourier
features, Nystrom landmarks and class-mean prototypes. The low-rank methods
never form an ``n x n`` inverse: with features ``Z`` (``K ~ Z Z^T``) they use

    (s2 I + Z Z^T)^-1 = (I - Z (s2 I + Z^T Z)^-1 Z^T) / s2

so only a ``D x D`` system is factorized (or ``n x n`` when that is smaller).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import (
    VARIANCE_FLOOR,
    CacheHyper,
    build_cache,
    confidence_calibrated_logits,
    factorize,
    one_hot,
    zero_shot_logits,
)
from .groups import GroupPartition, make_partition
from .kernel import kernel_matrix

__all__ = [
    "GroupPartition",
    "make_partition",
    "RffMap",
    "NystromSketch",
    "lowrank_inverse",
    "rff_logits",
    "nystrom_logits",
    "mean_prototype_logits",
    "bench_approx",
]


def lowrank_inverse(Z: np.ndarray) -> np.ndarray:
    """``(I + Z Z^T)^-1`` through the ``r x r`` system ``I + Z^T Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    inner = np.eye(Z.shape[1]) + Z.T @ Z
    return np.eye(Z.shape[0]) - Z @ linalg.solve(inner, Z.T, assume_a="pos")


def lowrank_gp(Zk: np.ndarray, Zq: np.ndarray, Y: np.ndarray, sigma2: float, eta: float) -> np.ndarray:
    """GP cache logits when ``K(keys, keys) ~ Zk Zk^T`` and ``K(q, keys) ~ Zq Zk^T``.

    Variance keeps the exact kernel's unit prior: ``1 - kq (K + s2 I)^-1 kq^T``.
    """
    n, D = Zk.shape
    if D < n:
        # push-through: kq (s2 I + Zk Zk^T)^-1 = Zq (s2 I + Zk^T Zk)^-1 Zk^T
        L, _ = factorize(Zk.T @ Zk, sigma2)
        A = linalg.cho_solve((L, True), Zq.T)  # (D, m)
        mean = A.T @ (Zk.T @ Y)
        quad = np.einsum("dm,dm->m", A, (Zk.T @ Zk) @ Zq.T)
    else:
        L, _ = factorize(Zk @ Zk.T, sigma2)
        Kq = Zq @ Zk.T
        mean = Kq @ linalg.cho_solve((L, True), Y)
        V = linalg.solve_triangular(L, Kq.T, lower=True)
        quad = np.einsum("ij,ij->j", V, V)
    if eta == 0:
        return mean
    var = np.maximum(1.0 - quad, VARIANCE_FLOOR)
    return mean / var[:, None] ** eta


# ---------------------------------------------------------------------------
# random Fourier features


@dataclass(frozen=True)
class RffMap:
    """``z(x) = sqrt(2/D) cos(Omega x + phase)`` with ``Omega ~ N(0, beta I)``.

    For unit vectors ``exp(-beta (1 - x.y)) = exp(-beta/2 |x - y|^2)``, an RBF
    kernel, whose spectral density is exactly this Gaussian.
    """

    frequencies: np.ndarray  # (D, dim)
    phases: np.ndarray  # (D,)
    beta: float
    seed: int

    @classmethod
    def sample(cls, D: int, dim: int, beta: float, seed: int = 0) -> "RffMap":
        if D < 1 or dim < 1 or beta <= 0:
            raise ValueError("need D >= 1, dim >= 1, beta > 0")
        rng = np.random.default_rng(seed)
        freqs = rng.standard_normal((D, dim)) * np.sqrt(beta)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=D)
        return cls(freqs, phases, float(beta), seed)

    @property
    def D(self) -> int:
        return self.frequencies.shape[0]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.sqrt(2.0 / self.D) * np.cos(X @ self.frequencies.T + self.phases)


def rff_logits(F, labels, queries, hyper: CacheHyper, rff: RffMap, num_classes=None) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if rff.frequencies.shape[1] != F.shape[1]:
        raise ValueError(f"map built for dim {rff.frequencies.shape[1]}, keys have {F.shape[1]}")
    if not np.isclose(rff.beta, hyper.beta):
        raise ValueError(f"map built for beta={rff.beta}, hyper has beta={hyper.beta}")
    labels = np.asarray(labels, dtype=np.int64)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    return lowrank_gp(rff(F), rff(queries), one_hot(labels, c), hyper.sigma2, hyper.eta)


# ---------------------------------------------------------------------------
# Nystrom


@dataclass(frozen=True)
class NystromSketch:
    landmarks: np.ndarray  # key row indices
    basis: np.ndarray  # U_r diag(lambda_r)^-1/2, maps K(x, landmarks) to features
    keys: np.ndarray  # landmark key vectors
    beta: float

    @property
    def L(self) -> int:
        return self.landmarks.size

    def features(self, X: np.ndarray) -> np.ndarray:
        return kernel_matrix(X, self.keys, self.beta) @ self.basis


def balanced_landmarks(labels: np.ndarray, L: int, num_classes: int, seed: int) -> np.ndarray:
    """``L / c`` keys per class, uniform without replacement within each class."""
    if L % num_classes:
        raise ValueError(f"L={L} must be a multiple of the class count {num_classes}")
    per = L // num_classes
    rng = np.random.default_rng(seed)
    picks = []
    for j in range(num_classes):
        rows = np.flatnonzero(labels == j)
        if rows.size < per:
            raise ValueError(f"class {j} has {rows.size} keys, {per} landmarks requested")
        picks.append(np.sort(rng.choice(rows, size=per, replace=False)))
    return np.concatenate(picks)


def nystrom_sketch(F, labels, L: int, beta: float, seed: int = 0, num_classes=None) -> NystromSketch:
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    if not 1 <= L <= F.shape[0]:
        raise ValueError(f"need 1 <= L <= n={F.shape[0]}, got {L}")
    idx = balanced_landmarks(labels, L, c, seed)
    lam, U = linalg.eigh(kernel_matrix(F[idx], F[idx], beta))
    keep = lam > 1e-10 * lam.max()
    if not keep.any():
        raise ValueError("landmark kernel is numerically zero")
    basis = U[:, keep] / np.sqrt(lam[keep])
    return NystromSketch(idx, basis, F[idx], float(beta))


def nystrom_logits(F, labels, queries, hyper: CacheHyper, L: int, seed: int = 0, num_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    sk = nystrom_sketch(F, labels, L, hyper.beta, seed, c)
    return lowrank_gp(sk.features(F), sk.features(queries), one_hot(labels, c), hyper.sigma2, hyper.eta)


# ---------------------------------------------------------------------------
# class means


def class_prototypes(F: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    P = np.zeros((num_classes, F.shape[1]))
    np.add.at(P, labels, F)
    counts = np.bincount(labels, minlength=num_classes)
    if (counts == 0).any():
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} has no keys")
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def mean_prototype_logits(F, labels, queries, hyper: CacheHyper, num_classes=None) -> np.ndarray:
    """Exact GP over one re-normalized mean key per class."""
    labels = np.asarray(labels, dtype=np.int64)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    P = class_prototypes(F, labels, c)
    model = build_cache(P, np.arange(c), hyper, num_classes=c)
    return confidence_calibrated_logits(model, queries)


# ---------------------------------------------------------------------------
# benchmark

BENCH_COLUMNS = ("method", "param", "seed", "accuracy", "build_ms", "query_ms")


def _runner(method: str, param, F, y, c, hyper: CacheHyper, seed: int):
    """Return ``(build, query)`` closures; build's result feeds query."""
    if method == "exact":
        return (lambda: build_cache(F, y, hyper, num_classes=c)), confidence_calibrated_logits
    if method == "group":
        part = make_partition(c, int(param), seed)
        return (lambda: build_cache(F, y, hyper, partition=part, num_classes=c)), confidence_calibrated_logits
    if method == "mean":

        def build():
            return build_cache(class_prototypes(F, y, c), np.arange(c), hyper, num_classes=c)

        return build, confidence_calibrated_logits
    if method == "nystrom":

        def build():
            sk = nystrom_sketch(F, y, int(param), hyper.beta, seed, c)
            return sk, sk.features(F)

        def query(state, Q):
            sk, Zk = state
            return lowrank_gp(Zk, sk.features(Q), one_hot(y, c), hyper.sigma2, hyper.eta)

        return build, query
    if method == "rff":

        def build():
            m = RffMap.sample(int(param), F.shape[1], hyper.beta, seed)
            return m, m(F)

        def query(state, Q):
            m, Zk = state
            return lowrank_gp(Zk, m(Q), one_hot(y, c), hyper.sigma2, hyper.eta)

        return build, query
    raise ValueError(f"unknown method {method!r}")


def bench_approx(bundle, hyper: CacheHyper, methods, repeats: int = 3, seed: int = 0) -> list[dict]:
    """Time build and query phases per method; one row per (method, param, repeat).

    ``methods`` is a list of ``(name, param)`` with names ``exact``, ``group``
    (param g), ``nystrom`` (param L), ``rff`` (param D) and ``mean``. Repeat
    ``i`` uses seed ``seed + i`` for randomized methods.
    """
    F, y = bundle.train.x, bundle.train.y
    Q, truth = bundle.test.x, bundle.test.y
    c = bundle.num_classes
    zs = zero_shot_logits(bundle.weights, Q)
    rows = []
    for method, param in methods:
        for rep in range(repeats):
            s = seed + rep
            build, query = _runner(method, param, F, y, c, hyper, s)
            t0 = time.perf_counter()
            state = build()
            t1 = time.perf_counter()
            logits = zs + hyper.alpha * query(state, Q)
            t2 = time.perf_counter()
            acc = float(np.mean(np.argmax(logits, axis=1) == truth)) if truth.size else float("nan")
            rows.append(
                {
                    "method": method,
                    "param": "" if param is None else param,
                    "seed": s,
                    "accuracy": acc,
                    "build_ms": 1e3 * (t1 - t0),
                    "query_ms": 1e3 * (t2 - t1),
                }
            )
    return rows


def summarize_bench(rows: list[dict]) -> list[dict]:
    """Median timings and mean accuracy per (method, param)."""
    keys = []
    for r in rows:
        k = (r["method"], r["param"])
        if k not in keys:
            keys.append(k)
    out = []
    for k in keys:
        sel = [r for r in rows if (r["method"], r["param"]) == k]
        out.append(
            {
                "method": k[0],
                "param": k[1],
                "accuracy": float(np.mean([r["accuracy"] for r in sel])),
                "build_ms": float(np.median([r["build_ms"] for r in sel])),
                "query_ms": float(np.median([r["query_ms"] for r in sel])),
            }
        )
    return out


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in BENCH_COLUMNS})
    return buf.getvalue()
