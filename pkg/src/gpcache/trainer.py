"""Fine-tuning the cache keys by cross-entropy on the training split.

The keys start at the training features and are learned; the queries stay the
frozen training features. ``full_grad`` differentiates through the precision
matrix ``(K + s2 I)^-1``, ``nograd`` holds it constant. The N-W baseline runs
the same loop on the plain kernel readout.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .bundle_io import FeatureBundle
from .core import (
    VARIANCE_FLOOR,
    CacheHyper,
    CacheModel,
    build_cache,
    fused_logits,
    map_features,
    zero_shot_logits,
)
from .groups import GroupPartition
from .kernel import kernel_matrix
from .optim import SGD, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 0.001
    seed: int = 0
    mode: str = "full_grad"  # or "nograd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    renormalize: bool = True
    rebuild_every: int = 1
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.rebuild_every < 1:
            raise ValueError("need epochs >= 0, batch_size >= 1, rebuild_every >= 1")
        if not self.learning_rate >= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rate, momentum and weight decay must be non-negative")
        if self.mode not in ("full_grad", "nograd"):
            raise ValueError(f"unknown mode {self.mode!r}")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(labels.size), labels]))


def _softmax(Z: np.ndarray) -> np.ndarray:
    E = np.exp(Z - Z.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def _pull_back(model: CacheModel, dU: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw keys from the gradient w.r.t. the mapped keys."""
    F = model.keys
    if model.calib is not None:
        return model.calib.backward(F, dU)[0]
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    U = F / norms
    return (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / norms


def _group_grad(gs, Uq, Ug, dout, beta, eta, full):
    """Gradient w.r.t. one group's mapped keys given ``dL/d(group cache logits)``."""
    Kq = kernel_matrix(Uq, Ug, beta)
    Wq = linalg.cho_solve((gs.chol, True), Kq.T).T  # Kq A^-1
    mean = Kq @ gs.weights
    dKq = np.zeros_like(Kq)
    dA = np.zeros((Ug.shape[0], Ug.shape[0]))
    if eta == 0:
        dmean = dout
    else:
        var = np.maximum(1.0 - np.sum(Wq * Kq, axis=1), 0.0)
        vf = np.maximum(var, VARIANCE_FLOOR)
        dmean = dout / vf[:, None] ** eta
        dvf = -eta * np.sum(dout * mean, axis=1) / vf ** (eta + 1)
        dv = np.where(var > VARIANCE_FLOOR, dvf, 0.0)
        dKq -= 2.0 * dv[:, None] * Wq
        if full:
            dA += (Wq * dv[:, None]).T @ Wq
    dKq += dmean @ gs.weights.T
    if full:
        dA -= Wq.T @ dmean @ gs.weights.T
    dSq = dKq * (beta * Kq)
    dUg = dSq.T @ Uq
    if full:
        K = kernel_matrix(Ug, Ug, beta)
        dS = dA * (beta * K)
        dUg += (dS + dS.T) @ Ug
    return dUg


def loss_and_grad_keys(model: CacheModel, W: np.ndarray, batch, cfg: TrainConfig, path: str = "gp"):
    """Cross-entropy of the fused logits on ``batch = (queries, labels)`` and its key gradient.

    ``path="nw"`` differentiates the Nadaraya-Watson readout instead of the GP one.
    """
    queries, labels = batch
    Q = np.asarray(queries, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if Q.shape[0] == 0 or Q.shape[0] != labels.shape[0]:
        raise ValueError("batch must be non-empty with one label per query")
    mode = "nw" if path == "nw" else "gp"
    logits = fused_logits(model, W, Q, mode)
    loss = cross_entropy(logits, labels)
    grad = np.zeros_like(model.keys, dtype=np.float64)
    alpha = model.hyper.alpha
    if alpha == 0:
        return loss, grad
    P = _softmax(logits)
    P[np.arange(labels.size), labels] -= 1.0
    G = alpha * P / labels.size  # dL/d(cache logits)
    beta = model.hyper.beta
    Uq = map_features(Q, model.calib)
    U = model.mapped_keys()
    dU = np.zeros_like(U)
    if mode == "nw":
        Kq = kernel_matrix(Uq, U, beta)
        dKq = G[:, model.labels]
        dU = (dKq * (beta * Kq)).T @ Uq
    else:
        full = cfg.mode == "full_grad"
        for gs in model.solve:
            if gs.rows.size == 0:
                continue
            dU[gs.rows] += _group_grad(gs, Uq, U[gs.rows], G[:, gs.classes], beta, model.hyper.eta, full)
    grad = _pull_back(model, dU)
    if not np.all(np.isfinite(grad)):
        bad = np.argwhere(~np.isfinite(grad))[0]
        raise FloatingPointError(f"non-finite key gradient at {tuple(bad)} (loss {loss})")
    return loss, grad


def _renormalize(F: np.ndarray) -> np.ndarray:
    return F / np.linalg.norm(F, axis=1, keepdims=True)


def _finetune(bundle, hyper, cfg, calib, partition, path):
    c = bundle.num_classes
    X, y = bundle.train.x, bundle.train.y
    solve = path == "gp"

    def build(F):
        return build_cache(F, y, hyper, calib, partition, num_classes=c, solve=solve)

    model = build(X)
    cfg.history.clear()
    if cfg.epochs == 0:
        return model
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    F = np.array(X, dtype=np.float64)
    mode = "gp" if solve else "nw"
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            loss, grad = loss_and_grad_keys(model, bundle.weights, (X[rows], y[rows]), cfg, path)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch} step {step}")
            F = opt.step(F, grad, cosine_lr(cfg.learning_rate, step, total))
            if cfg.renormalize:
                F = _renormalize(F)
            step += 1
            if step % cfg.rebuild_every == 0 or step == total:
                model = build(F)
            losses.append(loss)
            sizes.append(rows.size)
        train_loss = float(np.average(losses, weights=sizes))
        val_acc = float("nan")
        if bundle.val.rows:
            pred = np.argmax(fused_logits(model, bundle.weights, bundle.val.x, mode), axis=1)
            val_acc = float(np.mean(pred == bundle.val.y))
        wall_ms = (time.perf_counter() - t0) * 1e3
        cfg.history.append((epoch, train_loss, val_acc, wall_ms))
        log.info("finetune epoch %d loss %.6f val %.4f", epoch, train_loss, val_acc)
    return model


def finetune(
    bundle: FeatureBundle,
    hyper: CacheHyper,
    cfg: TrainConfig,
    calib=None,
    partition: GroupPartition | None = None,
) -> CacheModel:
    """Learn the keys of the GP cache; the returned model is built from the final keys.

    Per-epoch ``(epoch, train_loss, val_accuracy, wall_ms)`` goes to ``cfg.history``.
    """
    return _finetune(bundle, hyper, cfg, calib, partition, "gp")


def finetune_nw_baseline(bundle: FeatureBundle, hyper: CacheHyper, cfg: TrainConfig, calib=None) -> CacheModel:
    """Same loop on the Nadaraya-Watson readout; score the result with ``mode="nw"``."""
    return _finetune(bundle, hyper, cfg, calib, None, "nw")


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_accuracy,wall_ms"]
    lines += [f"{e},{l:.8f},{a:.6f},{w:.3f}" for e, l, a, w in history]
    return "\n".join(lines) + "\n"


def zero_shot_accuracy(bundle: FeatureBundle, split: str = "test") -> float:
    s = getattr(bundle, split)
    return float(np.mean(np.argmax(zero_shot_logits(bundle.weights, s.x), axis=1) == s.y))
