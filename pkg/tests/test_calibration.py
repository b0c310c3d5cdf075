import numpy as np
import pytest

from gpcache.calibration import (
    CalibrationLayer,
    ContrastiveConfig,
    calibrated_similarity,
    contrastive_loss,
    mine_neighbors,
    mine_neighbors_all,
    random_neighbors,
    train_calibration,
)

from conftest import unit_rows


def loop_loss(layer, X, Xa, sets, tau):
    """Scalar-loop InfoNCE: mean over anchors of summed -log softmax terms."""
    U, Ua = layer.apply(X), layer.apply(Xa)
    total = 0.0
    for s in sets:
        for i in s:
            logits = np.array([Ua[i] @ U[j] / tau for j in s])
            pos = logits[list(s).index(i)]
            total -= pos - np.log(np.exp(logits).sum())
    return total / len(sets)


class TestLayer:
    def test_identity_init(self, rng):
        X = unit_rows(rng, 5, 4)
        np.testing.assert_allclose(CalibrationLayer.identity(4).apply(X), X, atol=1e-15)

    def test_output_unit_norm(self, rng):
        layer = CalibrationLayer(rng.standard_normal((6, 6)), rng.standard_normal(6))
        np.testing.assert_allclose(np.linalg.norm(layer.apply(unit_rows(rng, 9, 6)), axis=1), 1.0)

    def test_similarity_symmetric_and_bounded(self, rng):
        layer = CalibrationLayer(rng.standard_normal((4, 4)))
        a, b = unit_rows(rng, 2, 4)
        s = calibrated_similarity(layer, a, b)
        assert s == pytest.approx(calibrated_similarity(layer, b, a), abs=1e-15)
        assert -1.0 <= s <= 1.0

    def test_backward_finite_difference(self, rng):
        X = unit_rows(rng, 4, 3)
        layer = CalibrationLayer(0.3 * rng.standard_normal((3, 3)), 0.1 * rng.standard_normal(3))
        R = rng.standard_normal((4, 3))
        _, dproj, dbias = layer.backward(X, R)
        h = 1e-6
        for i in range(3):
            for j in range(3):
                E = np.zeros((3, 3))
                E[i, j] = h
                up = np.sum(R * CalibrationLayer(layer.proj + E, layer.bias).apply(X))
                dn = np.sum(R * CalibrationLayer(layer.proj - E, layer.bias).apply(X))
                assert dproj[i, j] == pytest.approx((up - dn) / (2 * h), rel=1e-6, abs=1e-9)
        e = np.eye(3) * h
        num = [
            (np.sum(R * CalibrationLayer(layer.proj, layer.bias + e[k]).apply(X))
             - np.sum(R * CalibrationLayer(layer.proj, layer.bias - e[k]).apply(X))) / (2 * h)
            for k in range(3)
        ]
        np.testing.assert_allclose(dbias, num, rtol=1e-6, atol=1e-9)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            CalibrationLayer.identity(3).apply(unit_rows(rng, 2, 4))


class TestMining:
    def test_oracle(self, rng):
        X = unit_rows(rng, 30, 5)
        for a in (0, 7, 29):
            sims = X @ X[a]
            order = sorted(range(30), key=lambda j: (-sims[j], j))
            expected = [a] + [j for j in order if j != a][:5]
            np.testing.assert_array_equal(mine_neighbors(X, a, 6), expected)

    def test_duplicate_rows_keep_anchor_first(self):
        X = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(mine_neighbors(X, 1, 2), [1, 0])

    def test_r_bounds(self, rng):
        with pytest.raises(ValueError):
            mine_neighbors_all(unit_rows(rng, 3, 2), 4)

    def test_random_sets_exclude_duplicates(self, rng):
        sets = random_neighbors(20, 6, np.arange(20), rng)
        assert all(s[0] == a and len(set(s)) == 6 for a, s in enumerate(sets))


class TestLoss:
    def test_matches_loop_oracle(self, backend, rng):
        X, Xa = unit_rows(rng, 10, 4), unit_rows(rng, 10, 4)
        layer = CalibrationLayer(0.2 * rng.standard_normal((4, 4)))
        sets = [np.array([0, 3, 5]), np.array([2, 9, 1, 4]), np.array([7, 8, 6])]
        loss, _ = contrastive_loss(layer, X, Xa, [0, 2, 7], sets, 0.25)
        assert loss == pytest.approx(loop_loss(layer, X, Xa, sets, 0.25), rel=1e-12)

    def test_gradient_finite_difference(self, backend, rng):
        X, Xa = unit_rows(rng, 8, 3), unit_rows(rng, 8, 3)
        layer = CalibrationLayer(0.2 * rng.standard_normal((3, 3)))
        sets = mine_neighbors_all(X, 4, anchors=np.array([0, 5, 6]))
        _, g = contrastive_loss(layer, X, Xa, [0, 5, 6], sets, 0.5)
        h = 1e-5
        num = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                E = np.zeros((3, 3))
                E[i, j] = h
                num[i, j] = (
                    contrastive_loss(CalibrationLayer(layer.proj + E), X, Xa, [0, 5, 6], sets, 0.5)[0]
                    - contrastive_loss(CalibrationLayer(layer.proj - E), X, Xa, [0, 5, 6], sets, 0.5)[0]
                ) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)

    def test_singleton_sets_have_zero_loss(self, rng):
        X = unit_rows(rng, 4, 3)
        loss, g = contrastive_loss(CalibrationLayer.identity(3), X, X, [0, 1], [[0], [1]], 0.1)
        assert loss == 0.0
        np.testing.assert_array_equal(g, 0.0)

    def test_bad_temperature(self, rng):
        X = unit_rows(rng, 3, 2)
        with pytest.raises(ValueError):
            contrastive_loss(CalibrationLayer.identity(2), X, X, [0], [[0, 1]], 0.0)


class TestTraining:
    def test_zero_epochs_identity(self, rng):
        X = unit_rows(rng, 20, 4)
        layer = train_calibration(X, X, ContrastiveConfig(epochs=0))
        np.testing.assert_array_equal(layer.proj, 0.0)

    def test_deterministic(self, rng):
        X, Xa = unit_rows(rng, 40, 5), unit_rows(rng, 40, 5)
        cfg = dict(batch_size=16, neighbors=8, epochs=2, seed=4)
        a = train_calibration(X, Xa, ContrastiveConfig(**cfg))
        b = train_calibration(X, Xa, ContrastiveConfig(**cfg))
        np.testing.assert_array_equal(a.proj, b.proj)

    def test_loss_decreases(self, rng):
        X = unit_rows(rng, 64, 6)
        Xa = X + 0.3 * rng.standard_normal(X.shape)
        Xa /= np.linalg.norm(Xa, axis=1, keepdims=True)
        cfg = ContrastiveConfig(batch_size=16, neighbors=16, epochs=8, learning_rate=0.05, temperature=0.2)
        train_calibration(X, Xa, cfg)
        losses = [v for _, v in cfg.history]
        assert len(losses) == 8 and losses[-1] < losses[0]

    def test_bias_trained(self, rng):
        X = unit_rows(rng, 32, 4)
        layer = train_calibration(X, X[::-1].copy(), ContrastiveConfig(batch_size=8, neighbors=4, epochs=1, bias=True))
        assert layer.bias is not None and np.any(layer.bias != 0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            train_calibration(unit_rows(rng, 4, 3), unit_rows(rng, 5, 3), ContrastiveConfig())


class TestNuisanceDirections:
    def test_margin_grows_when_augmentation_spans_nuisance(self):
        # within-class variation and augmentation share 16 fixed directions;
        # instance discrimination should learn to shrink them
        rng = np.random.default_rng(0)
        c, dim, nd = 10, 64, 16
        centers = unit_rows(rng, c, dim)
        basis = np.linalg.qr(rng.standard_normal((dim, nd)))[0].T

        def noise(n):
            return 0.1 * rng.standard_normal((n, dim)) + 0.4 * rng.standard_normal((n, nd)) @ basis

        def draw(per):
            y = np.repeat(np.arange(c), per)
            X = centers[y] + noise(y.size)
            return X / np.linalg.norm(X, axis=1, keepdims=True), y

        unl, _ = draw(64)
        aug = unl + noise(unl.shape[0])
        aug /= np.linalg.norm(aug, axis=1, keepdims=True)
        test, ty = draw(20)
        layer = train_calibration(unl, aug, ContrastiveConfig(neighbors=64, seed=0))

        def margin(X):
            S = X @ X.T
            same = ty[:, None] == ty[None, :]
            np.fill_diagonal(same, False)
            return S[same].mean() - S[ty[:, None] != ty[None, :]].mean()

        assert margin(layer.apply(test)) > margin(test) + 0.05
