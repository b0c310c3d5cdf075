import sys

import numpy as np
import pytest

from gpcache import _accel


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def small_instance(rng, c=None, k=None, d=None, m=6):
    """Random keys/labels/queries/weights for oracle comparisons."""
    c = c or int(rng.integers(2, 9))
    k = k or int(rng.integers(1, 9))
    d = d or int(rng.integers(3, 17))
    F = unit_rows(rng, c * k, d)
    y = np.repeat(np.arange(c), k)
    Q = unit_rows(rng, m, d)
    W = unit_rows(rng, c, d).T
    return F, y, Q, W


@pytest.fixture(params=["numpy", "numba"] if _accel.HAS_NUMBA else ["numpy"])
def backend(request):
    prev = _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
