import numpy as np
import pytest

from gpcache.approx import (
    BENCH_COLUMNS,
    RffMap,
    balanced_landmarks,
    bench_approx,
    bench_csv,
    class_prototypes,
    lowrank_gp,
    lowrank_inverse,
    mean_prototype_logits,
    nystrom_logits,
    nystrom_sketch,
    rff_logits,
    summarize_bench,
)
from gpcache.bundle_io import generate_synthetic
from gpcache.core import CacheHyper, build_cache, confidence_calibrated_logits

from conftest import small_instance, unit_rows
from oracles import dense_fused, kernel


class TestLowRank:
    @pytest.mark.parametrize("shape", [(5, 2), (16, 8), (32, 8), (4, 6)])
    def test_inverse_identity(self, rng, shape):
        Z = rng.standard_normal(shape)
        np.testing.assert_allclose(lowrank_inverse(Z), np.linalg.inv(np.eye(shape[0]) + Z @ Z.T), atol=1e-8)

    @pytest.mark.parametrize("D", [3, 40])
    def test_gp_both_branches_match_dense(self, rng, D):
        n, m, c = 12, 5, 3
        Zk, Zq = rng.standard_normal((n, D)) / np.sqrt(D), rng.standard_normal((m, D)) / np.sqrt(D)
        Y = np.eye(c)[rng.integers(0, c, n)]
        P = np.linalg.inv(Zk @ Zk.T + 0.5 * np.eye(n))
        Kq = Zq @ Zk.T
        var = np.maximum(1 - np.einsum("ij,jk,ik->i", Kq, P, Kq), 1e-6)
        ref = (Kq @ P @ Y) / var[:, None] ** 0.5
        np.testing.assert_allclose(lowrank_gp(Zk, Zq, Y, 0.5, 0.5), ref, atol=1e-9)


class TestNystrom:
    def test_full_landmarks_reproduce_kernel(self, rng):
        F, y, _, _ = small_instance(rng, c=4, k=5, d=6)
        sk = nystrom_sketch(F, y, 20, 2.0)
        Z = sk.features(F)
        np.testing.assert_allclose(Z @ Z.T, kernel(F, F, 2.0), atol=1e-8)

    def test_full_landmarks_match_exact_logits(self, rng):
        F, y, Q, W = small_instance(rng, c=3, k=4, d=5)
        h = CacheHyper(beta=3.0, sigma2=0.2, eta=0.5)
        exact = confidence_calibrated_logits(build_cache(F, y, h), Q)
        np.testing.assert_allclose(nystrom_logits(F, y, Q, h, 12), exact, atol=1e-6)

    def test_balanced(self):
        y = np.repeat(np.arange(4), 5)
        idx = balanced_landmarks(y, 8, 4, seed=1)
        np.testing.assert_array_equal(np.bincount(y[idx]), [2, 2, 2, 2])
        assert len(set(idx)) == 8

    def test_L_must_divide(self):
        with pytest.raises(ValueError):
            balanced_landmarks(np.repeat(np.arange(3), 4), 7, 3, 0)


class TestRff:
    def test_unbiased(self):
        rng = np.random.default_rng(0)
        x, z = unit_rows(rng, 2, 8)
        beta = 2.0
        est = []
        for s in range(50):
            m = RffMap.sample(1024, 8, beta, seed=s)
            est.append(float(m(x[None])[0] @ m(z[None])[0]))
        se = np.std(est, ddof=1) / np.sqrt(len(est))
        assert abs(np.mean(est) - np.exp(-beta * (1 - x @ z))) < 3 * se

    def test_beta_mismatch(self, rng):
        F, y, Q, _ = small_instance(rng)
        with pytest.raises(ValueError):
            rff_logits(F, y, Q, CacheHyper(beta=2.0), RffMap.sample(16, F.shape[1], 1.0))

    def test_converges_to_exact(self, rng):
        F, y, Q, _ = small_instance(rng, c=3, k=3, d=4)
        h = CacheHyper(beta=1.0, sigma2=1.0)
        exact = confidence_calibrated_logits(build_cache(F, y, h), Q)
        approx = rff_logits(F, y, Q, h, RffMap.sample(200_000, 4, 1.0, seed=2))
        np.testing.assert_allclose(approx, exact, atol=0.02)


class TestMeanPrototype:
    def test_matches_dense_gp_on_means(self, rng):
        F, y, Q, W = small_instance(rng, c=4, k=3, d=6)
        P = np.stack([F[y == j].mean(0) for j in range(4)])
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        h = CacheHyper(alpha=1.0, beta=2.0, sigma2=0.3, eta=0.5)
        got = mean_prototype_logits(F, y, Q, h)
        ref = dense_fused(P, np.arange(4), Q, np.zeros_like(W), 4, 1.0, 2.0, 0.3, 0.5)
        np.testing.assert_allclose(got, ref, atol=1e-9)
        np.testing.assert_allclose(class_prototypes(F, y, 4), P, atol=1e-14)


class TestBench:
    def test_rows_and_group_identity(self):
        b = generate_synthetic(c=4, k=4, dim=8, seed=0, n_test_per_class=10)
        h = CacheHyper(alpha=1.0, beta=2.0, sigma2=0.5, eta=0.5)
        methods = [("exact", None), ("group", 1), ("group", 2), ("nystrom", 8), ("rff", 64), ("mean", None)]
        rows = bench_approx(b, h, methods, repeats=2)
        assert len(rows) == len(methods) * 2
        acc = {(r["method"], r["param"]): r["accuracy"] for r in rows}
        assert acc[("group", 1)] == acc[("exact", "")]
        assert all(r["build_ms"] >= 0 and r["query_ms"] >= 0 for r in rows)
        header = bench_csv(rows).splitlines()[0]
        assert header == ",".join(BENCH_COLUMNS)
        assert len(summarize_bench(rows)) == len(methods)

    def test_unknown_method(self):
        b = generate_synthetic(c=2, k=2, dim=4, seed=0, n_test_per_class=2)
        with pytest.raises(ValueError):
            bench_approx(b, CacheHyper(), [("svgp", None)], repeats=1)
