"""Cosine similarities and the Gaussian kernel built on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel


@dataclass(frozen=True)
class KernelParams:
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")


def _as_params(params) -> KernelParams:
    return params if isinstance(params, KernelParams) else KernelParams(float(params))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, -1.0, 1.0))


def gaussian_kernel(s, params) -> np.ndarray | float:
    """``exp(-beta * (1 - s))`` with ``s`` clamped to [-1, 1]."""
    beta = _as_params(params).beta
    out = np.exp(-beta * (1.0 - np.clip(s, -1.0, 1.0)))
    return float(out) if np.ndim(out) == 0 else out


def similarity_matrix(A: np.ndarray, B: np.ndarray, calib=None) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if calib is not None:
        same = A is B
        A = calib.apply(A)
        B = A if same else calib.apply(B)
    return np.clip(A @ B.T, -1.0, 1.0)


def kernel_matrix(A: np.ndarray, B: np.ndarray, params, calib=None) -> np.ndarray:
    """Gaussian kernel between the rows of ``A`` and ``B``.

    With a calibration layer both sides are mapped through it first, so the
    entries use the calibrated similarity. One GEMM plus an element-wise pass.
    """
    beta = _as_params(params).beta
    A = np.asarray(A, dtype=np.float64)
    B = A if B is A else np.asarray(B, dtype=np.float64)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if calib is not None:
        same = B is A
        A = calib.apply(A)
        B = A if same else calib.apply(B)
    return _accel.gaussian_inplace(A @ B.T, beta)
