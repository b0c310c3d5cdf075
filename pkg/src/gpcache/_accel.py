"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. The backend is picked once at import from
the ``GPCACHE_NUMBA`` environment variable (``0``/``off`` forces numpy) and can
be switched at runtime with :func:`set_backend`, which the tests use to check
that both paths agree.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("GPCACHE_NUMBA", "1").strip().lower()
    return flag not in ("0", "off", "false", "no")


_backend = "numba" if (HAS_NUMBA and _env_wants_numba()) else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    previous, _backend = _backend, name
    return previous


def set_threads(n: int | None) -> None:
    """Cap numba's thread pool (BLAS threads are left to threadpoolctl)."""
    if HAS_NUMBA and n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# numpy reference implementations


def _gaussian_inplace_np(S, beta):
    np.clip(S, -1.0, 1.0, out=S)
    S -= 1.0
    S *= beta
    np.exp(S, out=S)
    return S


def _topk_np(S, r):
    # stable sort on the negated scores keeps the lower index first on ties
    return np.argsort(-S, axis=1, kind="stable")[:, :r].astype(np.int64)


def _contrastive_np(G, F, idx, tau):
    # G, F: compact calibrated rows; idx: (b, r) positions into them
    b = idx.shape[0]
    Gb = G[idx]  # (b, r, d)
    Fb = F[idx]
    Z = np.matmul(Gb, Fb.transpose(0, 2, 1)) / tau
    Z -= Z.max(axis=2, keepdims=True)
    E = np.exp(Z)
    P = E / E.sum(axis=2, keepdims=True)
    logp_diag = np.log(np.diagonal(P, axis1=1, axis2=2))
    loss = -logp_diag.sum() / b
    dZ = P.copy()
    r = idx.shape[1]
    dZ[:, np.arange(r), np.arange(r)] -= 1.0
    dZ /= tau * b
    dGb = np.matmul(dZ, Fb)
    dFb = np.matmul(dZ.transpose(0, 2, 1), Gb)
    dG = np.zeros_like(G)
    dF = np.zeros_like(F)
    flat = idx.ravel()
    np.add.at(dG, flat, dGb.reshape(-1, G.shape[1]))
    np.add.at(dF, flat, dFb.reshape(-1, F.shape[1]))
    return loss, dG, dF


# ---------------------------------------------------------------------------
# numba kernels

if HAS_NUMBA:

    @njit(parallel=True, cache=True, fastmath=True)
    def _gaussian_inplace_nb(S, beta):
        n, m = S.shape
        for i in prange(n):
            row = S[i]
            for j in range(m):
                s = min(max(row[j], -1.0), 1.0)
                row[j] = np.exp((s - 1.0) * beta)
        return S

    @njit(parallel=True, cache=True)
    def _topk_nb(S, r):
        # bounded insertion into a sorted buffer; equal values keep scan order,
        # so ties go to the lower index as in the stable numpy sort
        n, m = S.shape
        out = np.empty((n, r), dtype=np.int64)
        for i in prange(n):
            vals = np.empty(r)
            ids = np.empty(r, dtype=np.int64)
            cnt = 0
            for j in range(m):
                v = S[i, j]
                if cnt == r and v <= vals[r - 1]:
                    continue
                pos = cnt if cnt < r else r - 1
                while pos > 0 and vals[pos - 1] < v:
                    if pos < r:
                        vals[pos] = vals[pos - 1]
                        ids[pos] = ids[pos - 1]
                    pos -= 1
                vals[pos] = v
                ids[pos] = j
                if cnt < r:
                    cnt += 1
            out[i] = ids
        return out

    @njit(cache=True)
    def _contrastive_nb(G, F, idx, tau):
        b, r = idx.shape
        d = G.shape[1]
        dG = np.zeros_like(G)
        dF = np.zeros_like(F)
        Gs = np.empty((r, d))
        Fs = np.empty((r, d))
        loss = 0.0
        for t in range(b):
            for a in range(r):
                Gs[a] = G[idx[t, a]]
                Fs[a] = F[idx[t, a]]
            Z = (Gs @ Fs.T) / tau
            for a in range(r):
                zmax = Z[a].max()
                total = 0.0
                for c in range(r):
                    Z[a, c] = np.exp(Z[a, c] - zmax)
                    total += Z[a, c]
                for c in range(r):
                    Z[a, c] /= total
                loss -= np.log(Z[a, a])
                Z[a, a] -= 1.0
            Z *= 1.0 / (tau * b)
            dGs = Z @ Fs
            dFs = Z.T @ Gs
            for a in range(r):
                ia = idx[t, a]
                dG[ia] += dGs[a]
                dF[ia] += dFs[a]
        return loss / b, dG, dF


# ---------------------------------------------------------------------------
# dispatch


def gaussian_inplace(S: np.ndarray, beta: float) -> np.ndarray:
    """Overwrite a similarity matrix with ``exp(-beta * (1 - clip(S)))``."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    if _backend == "numba":
        return _gaussian_inplace_nb(S, float(beta))
    return _gaussian_inplace_np(S, float(beta))


def topk_rows(S: np.ndarray, r: int) -> np.ndarray:
    """Indices of the ``r`` largest entries per row, ties to the lower index."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    if _backend == "numba":
        return _topk_nb(S, int(r))
    return _topk_np(S, int(r))


def contrastive_batch(G: np.ndarray, F: np.ndarray, idx: np.ndarray, tau: float):
    """InfoNCE loss over neighbor sets and its gradients w.r.t. the rows of G, F.

    ``idx[t]`` lists row positions of the t-th set; position ``a`` in a set is
    paired with itself (``z_aa``) as the positive.
    """
    G = np.ascontiguousarray(G, dtype=np.float64)
    F = np.ascontiguousarray(F, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if _backend == "numba":
        return _contrastive_nb(G, F, idx, float(tau))
    return _contrastive_np(G, F, idx, float(tau))
