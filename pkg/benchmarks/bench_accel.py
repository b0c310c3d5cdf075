"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_accel.py [--repeats 5] [--csv out.csv]

Each kernel is warmed up once per backend (so JIT compilation is excluded),
then timed ``repeats`` times; the median is reported. Outputs are compared
between backends before timing.
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from gpcache import _accel
from gpcache.calibration import ContrastiveConfig, train_calibration
from gpcache.bundle_io import generate_synthetic


def _unit(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def cases(rng):
    A = _unit(rng, 4000, 64)
    S = A @ _unit(rng, 1600, 64).T
    yield "gaussian 4000x1600", lambda: _accel.gaussian_inplace(S.copy(), 5.5)

    X = _unit(rng, 2048, 64)
    G = X @ X.T
    yield "top-128 of 2048x2048", lambda: _accel.topk_rows(G, 128)

    F = _unit(rng, 4096, 64)
    Ga = _unit(rng, 4096, 64)
    idx = np.stack([rng.permutation(4096)[:128] for _ in range(32)])
    yield "contrastive 32x128", lambda: _accel.contrastive_batch(Ga, F, idx, 0.07)

    b = generate_synthetic(c=10, k=4, dim=64, seed=0, n_test_per_class=0, n_unlabeled_per_class=64)
    cfg = ContrastiveConfig(neighbors=64, epochs=2)
    yield "train_calibration 640 rows", lambda: train_calibration(b.unlabeled, b.unlabeled_aug, cfg)


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if hasattr(a, "proj"):
        return np.allclose(a.proj, b.proj, atol=1e-9)
    if np.isscalar(a):
        return np.isclose(a, b, rtol=1e-10)
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", default=None)
    args = p.parse_args(argv)
    if not _accel.HAS_NUMBA:
        print("numba not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, fn in cases(np.random.default_rng(0)):
        timings, outputs = {}, {}
        for backend in ("numpy", "numba"):
            prev = _accel.set_backend(backend)
            try:
                outputs[backend] = fn()
                ts = []
                for _ in range(args.repeats):
                    t0 = time.perf_counter()
                    fn()
                    ts.append(time.perf_counter() - t0)
            finally:
                _accel.set_backend(prev)
            timings[backend] = 1e3 * statistics.median(ts)
        agree = _same(outputs["numpy"], outputs["numba"])
        speedup = timings["numpy"] / timings["numba"]
        rows.append((name, timings["numpy"], timings["numba"], speedup, agree))
        print(f"{name:<28} numpy {timings['numpy']:9.2f} ms  numba {timings['numba']:9.2f} ms  "
              f"x{speedup:5.2f}  agree={agree}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "numpy_ms", "numba_ms", "speedup", "agree"])
            w.writerows(rows)
    return 0 if all(r[4] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
