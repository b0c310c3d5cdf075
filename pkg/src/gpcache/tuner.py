"""Validation-set grid search over (alpha, beta, sigma2, eta) and evaluation."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .bundle_io import FeatureBundle, LabeledSplit
from .core import (
    CacheHyper,
    assemble,
    build_cache,
    fused_logits,
    gp_parts,
    nw_cache_logits,
    zero_shot_logits,
)
from .groups import GroupPartition

DEFAULT_ALPHA = (0.1, 0.3, 1.0, 3.0, 10.0, 30.0)
DEFAULT_BETA = (1.0, 2.0, 5.5, 10.0, 20.0)
DEFAULT_SIGMA2 = (0.01, 0.1, 1.0, 10.0, 100.0)
DEFAULT_ETA = (0.0, 0.25, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class SearchSpace:
    alpha: tuple[float, ...] = DEFAULT_ALPHA
    beta: tuple[float, ...] = DEFAULT_BETA
    sigma2: tuple[float, ...] = DEFAULT_SIGMA2
    eta: tuple[float, ...] = DEFAULT_ETA

    def __post_init__(self):
        for name in ("alpha", "beta", "sigma2", "eta"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"search list for {name} is empty")
            object.__setattr__(self, name, vals)
        if min(self.beta) <= 0:
            raise ValueError("beta values must be positive")

    @property
    def size(self) -> int:
        return len(self.alpha) * len(self.beta) * len(self.sigma2) * len(self.eta)


@dataclass(frozen=True)
class SearchView:
    """Train and validation splits only; the test split is not reachable from here."""

    train: LabeledSplit
    val: LabeledSplit
    weights: np.ndarray

    @classmethod
    def of(cls, bundle: FeatureBundle) -> "SearchView":
        return cls(bundle.train, bundle.val, bundle.weights)

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


@dataclass
class SearchResult:
    best: CacheHyper
    best_val_acc: float
    table: list[dict] = field(default_factory=list)


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} labels")
    if truth.size == 0:
        return float("nan")
    return float(np.mean(pred == truth))


def grid_search(
    data: FeatureBundle | SearchView,
    space: SearchSpace | None = None,
    mode: str = "gp",
    calib=None,
    partition: GroupPartition | None = None,
) -> SearchResult:
    """Exhaustive search on the validation split.

    Loop order is beta, sigma2, eta, alpha: one factorization per (beta, sigma2)
    serves every eta and alpha. Ties go to the smallest (alpha, beta, sigma2,
    eta) tuple. ``mode="nw"`` ignores sigma2 and eta but still emits their rows.
    """
    view = data if isinstance(data, SearchView) else SearchView.of(data)
    space = space or SearchSpace()
    if view.val.rows == 0:
        raise ValueError("grid search needs a non-empty validation split")
    if mode not in ("nw", "gp"):
        raise ValueError(f"unknown mode {mode!r}")
    c = view.num_classes
    Q, truth = view.val.x, view.val.y
    zs = zero_shot_logits(view.weights, Q)
    table = []
    for beta in space.beta:
        if mode == "nw":
            base = CacheHyper(1.0, beta, 0.0, 0.0)
            model = build_cache(view.train.x, view.train.y, base, calib, num_classes=c, solve=False)
            cc = nw_cache_logits(model, Q)
        for sigma2 in space.sigma2:
            if mode == "gp":
                base = CacheHyper(1.0, beta, sigma2, 0.0)
                model = build_cache(view.train.x, view.train.y, base, calib, partition, num_classes=c)
                parts = gp_parts(model, Q)
            for eta in space.eta:
                if mode == "gp":
                    cc = assemble(parts, Q.shape[0], c, eta)
                for alpha in space.alpha:
                    acc = accuracy(np.argmax(zs + alpha * cc, axis=1), truth)
                    table.append({"alpha": alpha, "beta": beta, "sigma2": sigma2, "eta": eta, "val_acc": acc})
    best_row = min(table, key=lambda r: (-r["val_acc"], r["alpha"], r["beta"], r["sigma2"], r["eta"]))
    best = CacheHyper(best_row["alpha"], best_row["beta"], best_row["sigma2"], best_row["eta"])
    return SearchResult(best, best_row["val_acc"], table)


def search_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "sigma2", "eta", "val_acc"])
    for r in table:
        w.writerow([repr(r["alpha"]), repr(r["beta"]), repr(r["sigma2"]), repr(r["eta"]), f"{r['val_acc']:.6f}"])
    return buf.getvalue()


def per_class_accuracy(pred, truth, c: int) -> list[float]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    out = []
    for j in range(c):
        sel = truth == j
        out.append(float(np.mean(pred[sel] == j)) if sel.any() else float("nan"))
    return out


def evaluate(
    bundle: FeatureBundle,
    hyper: CacheHyper,
    mode: str = "gp",
    calib=None,
    partition: GroupPartition | None = None,
    model=None,
) -> dict:
    """Build from the train split (unless ``model`` is given) and score val and test."""
    c = bundle.num_classes
    if model is None:
        model = build_cache(
            bundle.train.x, bundle.train.y, hyper, calib, partition, num_classes=c, solve=(mode == "gp")
        )
    out = {}
    for name in ("val", "test"):
        split = getattr(bundle, name)
        if split.rows == 0:
            out[f"{name}_acc"] = float("nan")
            continue
        pred = np.argmax(fused_logits(model, bundle.weights, split.x, mode), axis=1)
        out[f"{name}_acc"] = accuracy(pred, split.y)
        if name == "test":
            out["per_class_acc"] = per_class_accuracy(pred, split.y, c)
    out.setdefault("per_class_acc", [])
    return out


def grid_product(space: SearchSpace):
    return itertools.product(space.alpha, space.beta, space.sigma2, space.eta)
