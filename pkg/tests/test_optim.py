import numpy as np
import pytest

from gpcache.optim import SGD, cosine_lr


class TestCosineLR:
    def test_endpoints(self):
        assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
        assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)

    def test_monotone(self):
        lrs = [cosine_lr(1.0, s, 37) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestSGD:
    def test_momentum_recursion(self):
        # hand-unrolled heavy ball with coupled weight decay
        p = np.array([1.0, -2.0])
        grads = [np.array([0.5, 0.1]), np.array([-0.2, 0.3]), np.array([0.0, 1.0])]
        opt = SGD(momentum=0.9, weight_decay=0.1)
        q, v = p.copy(), None
        for g in grads:
            gg = g + 0.1 * q
            v = gg if v is None else 0.9 * v + gg
            q = q - 0.01 * v
            p = opt.step(p, g, 0.01)
        np.testing.assert_allclose(p, q, rtol=1e-15)

    def test_zero_lr_is_noop(self):
        p = np.arange(4.0)
        np.testing.assert_array_equal(SGD().step(p, np.ones(4), 0.0), p)
