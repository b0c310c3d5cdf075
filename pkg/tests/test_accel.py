import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpcache import _accel

pytestmark = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")


def both(fn, *args):
    out = {}
    for name in ("numpy", "numba"):
        prev = _accel.set_backend(name)
        try:
            out[name] = fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])
        finally:
            _accel.set_backend(prev)
    return out["numpy"], out["numba"]


class TestBackendSwitch:
    def test_set_backend_returns_previous(self):
        prev = _accel.set_backend("numpy")
        assert _accel.set_backend(prev) == "numpy"
        assert _accel.get_backend() == prev

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            _accel.set_backend("cuda")

    @pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba")])
    def test_env_flag(self, flag, expected):
        env = dict(os.environ, GPCACHE_NUMBA=flag, PYTHONWARNINGS="ignore")
        out = subprocess.run(
            [sys.executable, "-c", "from gpcache import _accel; print(_accel.get_backend())"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == expected


class TestGaussian:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.floats(0.1, 30.0), st.integers(0, 2**31))
    def test_backends_agree(self, n, m, beta, seed):
        S = np.random.default_rng(seed).uniform(-1.2, 1.2, (n, m))
        a, b = both(_accel.gaussian_inplace, S, beta)
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=0)

    def test_clamps_out_of_range(self, backend):
        S = np.array([[1.5, -3.0, 0.5]])
        out = _accel.gaussian_inplace(S, 2.0)
        np.testing.assert_allclose(out, [[1.0, np.exp(-4.0), np.exp(-1.0)]], rtol=1e-15)


class TestTopK:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 60), st.integers(0, 2**31))
    def test_backends_agree_with_ties(self, n, m, seed):
        rng = np.random.default_rng(seed)
        S = rng.integers(0, 5, (n, m)).astype(float)  # heavy ties
        r = int(rng.integers(1, m + 1))
        a, b = both(_accel.topk_rows, S, r)
        np.testing.assert_array_equal(a, b)

    def test_ties_go_to_lower_index(self, backend):
        S = np.array([[0.5, 0.9, 0.5, 0.9, 0.1]])
        np.testing.assert_array_equal(_accel.topk_rows(S, 4), [[1, 3, 0, 2]])


class TestContrastiveBatch:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(2, 6), st.integers(0, 2**31))
    def test_backends_agree(self, b, r, d, seed):
        rng = np.random.default_rng(seed)
        n = r + 3
        G = rng.standard_normal((n, d))
        F = rng.standard_normal((n, d))
        idx = np.stack([rng.permutation(n)[:r] for _ in range(b)])
        (la, ga, fa), (lb, gb, fb) = both(_accel.contrastive_batch, G, F, idx, 0.3)
        assert la == pytest.approx(lb, rel=1e-12)
        np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(fa, fb, rtol=1e-10, atol=1e-12)

    def test_scalar_oracle(self, backend, rng):
        G = rng.standard_normal((5, 3))
        F = rng.standard_normal((5, 3))
        idx = np.array([[0, 2, 4], [1, 0, 3]])
        tau = 0.5
        expected = 0.0
        for row in idx:
            for a in row:
                z = [G[a] @ F[j] / tau for j in row]
                expected -= z[list(row).index(a)] - np.log(np.sum(np.exp(z)))
        loss, _, _ = _accel.contrastive_batch(G, F, idx, tau)
        assert loss == pytest.approx(expected / 2, rel=1e-12)
