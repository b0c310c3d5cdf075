"""Self-supervised similarity calibration.

A residual linear layer ``phi(f) = normalize(f + theta f [+ bias])`` is fitted
on unlabeled features with an InfoNCE loss whose negatives come from each
anchor's nearest neighbors in the original feature space (hard mining). The
positive for row ``i`` is its own augmented view: ``z_ij = phi(g_i) . phi(f_j)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .optim import SGD, cosine_lr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationLayer:
    proj: np.ndarray  # (dim, dim), rows map onto output coordinates
    bias: np.ndarray | None = None

    def __post_init__(self):
        proj = np.asarray(self.proj, dtype=np.float64)
        if proj.ndim != 2 or proj.shape[0] != proj.shape[1]:
            raise ValueError(f"projection must be square, got {proj.shape}")
        if not np.all(np.isfinite(proj)):
            raise ValueError("projection has non-finite entries")
        object.__setattr__(self, "proj", proj)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if bias.shape[0] != proj.shape[0] or not np.all(np.isfinite(bias)):
                raise ValueError("bias must be a finite vector of length dim")
            object.__setattr__(self, "bias", bias)

    @classmethod
    def identity(cls, dim: int, bias: bool = False) -> "CalibrationLayer":
        return cls(np.zeros((dim, dim)), np.zeros(dim) if bias else None)

    @property
    def dim(self) -> int:
        return self.proj.shape[0]

    def pre_norm(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: features {X.shape[-1]} vs layer {self.dim}")
        H = X + X @ self.proj.T
        if self.bias is not None:
            H = H + self.bias
        return H

    def apply(self, X: np.ndarray) -> np.ndarray:
        H = self.pre_norm(X)
        return H / np.linalg.norm(H, axis=-1, keepdims=True)

    def backward(self, X: np.ndarray, dU: np.ndarray):
        """Pull ``dL/d apply(X)`` back to ``(dL/dX, dL/dproj, dL/dbias)``."""
        H = self.pre_norm(X)
        norms = np.linalg.norm(H, axis=1, keepdims=True)
        U = H / norms
        dH = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms
        dbias = dH.sum(axis=0) if self.bias is not None else None
        return dH + dH @ self.proj, dH.T @ X, dbias


def calibrated_similarity(layer: CalibrationLayer, a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    ua, ub = layer.apply(a[None])[0], layer.apply(b[None])[0]
    return float(np.clip(ua @ ub, -1.0, 1.0))


# ---------------------------------------------------------------------------
# neighbor mining


def mine_neighbors(unlabeled: np.ndarray, anchor_index: int, r: int) -> np.ndarray:
    """Indices of the ``r`` rows most similar to the anchor (itself included).

    Similarity is the raw cosine of the original features; ties go to the lower
    index.
    """
    return mine_neighbors_all(unlabeled, r, anchors=np.array([anchor_index]))[0]


def mine_neighbors_all(
    unlabeled: np.ndarray, r: int, anchors: np.ndarray | None = None, block: int = 1024
) -> np.ndarray:
    X = np.asarray(unlabeled, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= {n} rows, got r={r}")
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    out = np.empty((anchors.size, r), dtype=np.int64)
    for start in range(0, anchors.size, block):
        rows = anchors[start : start + block]
        out[start : start + rows.size] = _accel.topk_rows(X[rows] @ X.T, r)
    # a duplicate row may outrank the anchor on a tie; the anchor leads its own set
    for t, a in enumerate(anchors):
        if out[t, 0] != a:
            pos = np.flatnonzero(out[t] == a)
            if pos.size:
                out[t, 1 : pos[0] + 1] = out[t, : pos[0]].copy()
            else:
                out[t, 1:] = out[t, :-1].copy()
            out[t, 0] = a
    return out


def random_neighbors(n: int, r: int, anchors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Anchor plus ``r - 1`` uniformly drawn other rows (the no-mining ablation)."""
    out = np.empty((anchors.size, r), dtype=np.int64)
    for t, a in enumerate(anchors):
        others = rng.choice(n - 1, size=r - 1, replace=False)
        others[others >= a] += 1
        out[t, 0] = a
        out[t, 1:] = others
    return out


# ---------------------------------------------------------------------------
# loss


def contrastive_loss(
    layer: CalibrationLayer,
    originals: np.ndarray,
    augmented: np.ndarray,
    batch_anchors,
    neighbor_sets,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Mean over anchors of the summed InfoNCE terms of each neighbor set.

    Returns ``(loss, dloss/dproj)``.
    """
    if len(neighbor_sets) != len(batch_anchors):
        raise ValueError("one neighbor set per anchor required")
    loss, dproj, _ = _loss_and_grads(layer, originals, augmented, neighbor_sets, tau)
    return loss, dproj


def _loss_and_grads(layer, originals, augmented, neighbor_sets, tau):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sets = [np.asarray(s, dtype=np.int64).reshape(-1) for s in neighbor_sets]
    if not sets or any(s.size == 0 for s in sets):
        raise ValueError("empty neighbor set")
    b = len(sets)
    loss = 0.0
    dproj = np.zeros_like(layer.proj)
    dbias = np.zeros(layer.dim) if layer.bias is not None else None
    # sets of equal size are evaluated together; only rows that occur are mapped
    for size in sorted({s.size for s in sets}):
        idx = np.stack([s for s in sets if s.size == size])
        rows, local = np.unique(idx, return_inverse=True)
        local = local.reshape(idx.shape)
        Xf = np.asarray(originals, dtype=np.float64)[rows]
        Xg = np.asarray(augmented, dtype=np.float64)[rows]
        part, dG, dF = _accel.contrastive_batch(layer.apply(Xg), layer.apply(Xf), local, tau)
        w = idx.shape[0] / b
        loss += w * part
        for Xs, dU in ((Xf, dF), (Xg, dG)):
            _, gp, gb = layer.backward(Xs, w * dU)
            dproj += gp
            if dbias is not None:
                dbias += gb
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite contrastive loss {loss}")
    return float(loss), dproj, dbias


# ---------------------------------------------------------------------------
# training


@dataclass
class ContrastiveConfig:
    batch_size: int = 256
    neighbors: int = 128
    temperature: float = 0.07
    epochs: int = 10
    learning_rate: float = 0.01
    weight_decay: float = 5e-2
    momentum: float = 0.9
    seed: int = 0
    bias: bool = False
    mining: str = "hard"  # or "random" for the no-mining ablation
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.batch_size < 1 or self.neighbors < 1 or self.epochs < 0:
            raise ValueError("batch_size and neighbors must be >= 1, epochs >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.mining not in ("hard", "random"):
            raise ValueError(f"unknown mining mode {self.mining!r}")


def train_calibration(
    unlabeled: np.ndarray, augmented: np.ndarray, cfg: ContrastiveConfig
) -> CalibrationLayer:
    """Fit the residual projection; per-epoch ``(epoch, mean_loss)`` goes to ``cfg.history``."""
    X = np.asarray(unlabeled, dtype=np.float64)
    Xa = np.asarray(augmented, dtype=np.float64)
    if X.shape != Xa.shape:
        raise ValueError(f"unlabeled {X.shape} and augmented {Xa.shape} must match")
    n, dim = X.shape
    layer = CalibrationLayer.identity(dim, bias=cfg.bias)
    cfg.history.clear()
    if cfg.epochs == 0 or n == 0:
        return layer
    r = min(cfg.neighbors, n)
    rng = np.random.default_rng(cfg.seed)
    hard = mine_neighbors_all(X, r) if cfg.mining == "hard" else None
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt_w = SGD(cfg.momentum, cfg.weight_decay)
    opt_b = SGD(cfg.momentum, cfg.weight_decay) if cfg.bias else None
    proj, bias = layer.proj, layer.bias
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            anchors = order[start : start + cfg.batch_size]
            sets = hard[anchors] if hard is not None else random_neighbors(n, r, anchors, rng)
            layer = CalibrationLayer(proj, bias)
            try:
                loss, gproj, gbias = _loss_and_grads(layer, X, Xa, sets, cfg.temperature)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch} step {step}: {exc}") from None
            lr = cosine_lr(cfg.learning_rate, step, total)
            proj = opt_w.step(proj, gproj, lr)
            if opt_b is not None:
                bias = opt_b.step(bias, gbias, lr)
            losses.append(loss)
            step += 1
        mean_loss = float(np.mean(losses))
        cfg.history.append((epoch, mean_loss))
        log.info("calibration epoch %d loss %.6f", epoch, mean_loss)
    return CalibrationLayer(proj, bias)
