import numpy as np
import pytest

from layermatch import netcore
from layermatch.netcore import (
    CheckpointError,
    ClassifierParams,
    FeatureExtractorParams,
)

FD_STEP = 1e-5
FD_TOL = 1e-4


def identity_layer(dim):
    return FeatureExtractorParams([np.eye(dim)], [np.zeros((dim, 1))], ["identity"])


def small_net(rng, in_dim=3, hidden=5, feat=4, act="tanh"):
    fe = netcore.init_feature_extractor([in_dim, hidden, feat], act, rng)
    clf = netcore.init_classifier(feat, 3, rng)
    return fe, clf


def fd_loss_grad(loss_fn, arr, idx, h=FD_STEP):
    orig = arr.flat[idx]
    arr.flat[idx] = orig + h
    lp = loss_fn()
    arr.flat[idx] = orig - h
    lm = loss_fn()
    arr.flat[idx] = orig
    return (lp - lm) / (2 * h)


def rel_err(a, n):
    denom = max(abs(a), abs(n))
    if denom < 1e-10:
        return 0.0
    return abs(a - n) / denom


class TestForward:
    def test_identity_layer_passes_through(self):
        fe = identity_layer(2)
        np.testing.assert_allclose(
            netcore.forward_features(fe, np.array([[1.0, 2.0]])), [[1.0, 2.0]]
        )

    def test_relu_layer(self):
        fe = FeatureExtractorParams([np.eye(2)], [np.zeros((2, 1))], ["relu"])
        np.testing.assert_allclose(
            netcore.forward_features(fe, np.array([[-1.0, 3.0]])), [[0.0, 3.0]]
        )

    def test_dim_mismatch_names_layer(self):
        fe, _ = small_net(np.random.default_rng(0))
        with pytest.raises(ValueError, match="layer 0"):
            netcore.forward_features(fe, np.ones((2, 7)))

    def test_zero_classifier_gives_uniform(self):
        clf = ClassifierParams(np.zeros((2, 4)), np.zeros((2, 1)))
        probs = netcore.forward_probs(clf, np.random.default_rng(1).normal(size=(3, 4)))
        np.testing.assert_allclose(probs, np.full((3, 2), 0.5))

    def test_three_way_tie(self):
        clf = ClassifierParams(np.zeros((3, 2)), np.zeros((3, 1)))
        probs = netcore.forward_probs(clf, np.zeros((1, 2)))
        np.testing.assert_allclose(probs, [[1 / 3, 1 / 3, 1 / 3]])

    def test_huge_logit_no_overflow(self):
        clf = ClassifierParams(np.array([[1000.0], [0.0]]), np.zeros((2, 1)))
        probs = netcore.forward_probs(clf, np.array([[1.0]]))
        assert np.isfinite(probs).all()
        np.testing.assert_allclose(probs[0, 0], 1.0, atol=1e-12)

    def test_nonfinite_logits_rejected(self):
        clf = ClassifierParams(np.array([[np.inf, 0.0]]), np.zeros((1, 1)))
        with pytest.raises(FloatingPointError):
            netcore.forward_probs(clf, np.ones((1, 2)))


class TestBackward:
    def test_sum_of_logits_linear_grad(self):
        # d(sum logits)/dW for one linear head is the feature column sums
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(6, 4))
        fe = identity_layer(4)
        clf = netcore.init_classifier(4, 3, rng)
        cache = netcore.forward_model(fe, clf, feats)
        grads = netcore.backward(fe, clf, cache, np.ones((6, 3)))
        np.testing.assert_allclose(
            grads.classifier_weight, np.tile(feats.sum(axis=0), (3, 1)), rtol=1e-12
        )

    def test_zero_inputs_zero_bias_kill_feature_grads(self):
        rng = np.random.default_rng(3)
        fe, clf = small_net(rng)
        x = np.zeros((4, 3))
        cache = netcore.forward_model(fe, clf, x)
        y = np.zeros((4, 3))
        y[:, 0] = 1.0
        grads = netcore.backward(fe, clf, cache, (cache.probs - y) / 4)
        # every layer input is the zero matrix, so every dW = delta^T @ X = 0
        for gw in grads.feature_weights:
            np.testing.assert_allclose(gw, 0.0, atol=1e-15)

    def test_ce_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        fe, clf = small_net(rng)
        x = rng.normal(size=(5, 3))
        y = np.zeros((5, 3))
        y[np.arange(5), rng.integers(0, 3, size=5)] = 1.0

        def loss():
            cache = netcore.forward_model(fe, clf, x)
            return float(-np.mean(np.sum(y * np.log(cache.probs), axis=1)))

        cache = netcore.forward_model(fe, clf, x)
        grads = netcore.backward(fe, clf, cache, (cache.probs - y) / 5)
        surfaces = [
            (fe.weights[0], grads.feature_weights[0]),
            (fe.weights[1], grads.feature_weights[1]),
            (fe.biases[0], grads.feature_biases[0]),
            (clf.weight, grads.classifier_weight),
            (clf.bias, grads.classifier_bias),
        ]
        coord_rng = np.random.default_rng(5)
        checked = 0
        for param, grad in surfaces:
            for _ in range(25):
                idx = int(coord_rng.integers(param.size))
                numeric = fd_loss_grad(loss, param, idx)
                assert rel_err(float(grad.flat[idx]), numeric) < FD_TOL
                checked += 1
        assert checked >= 100


class TestInputGradients:
    def test_constant_model_zero_grad(self):
        fe = FeatureExtractorParams(
            [np.zeros((4, 2))], [np.zeros((4, 1))], ["identity"]
        )
        clf = ClassifierParams(np.zeros((2, 4)), np.zeros((2, 1)))
        g = netcore.grad_wrt_input(fe, clf, np.array([[0.3, -0.7]]), 0)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_sigmoid_slope_quarter_at_origin(self):
        # 2-class head with logits [0, x] is the sigmoid model P(x)
        fe = identity_layer(1)
        clf = ClassifierParams(np.array([[0.0], [1.0]]), np.zeros((2, 1)))
        g = netcore.grad_wrt_input(fe, clf, np.array([[0.0]]), 1)
        np.testing.assert_allclose(g, [[0.25]], rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        fe, clf = small_net(rng)
        x = rng.normal(size=(3, 3))
        g = netcore.grad_wrt_input(fe, clf, x, 2)

        def prob_sum():
            feats = netcore.forward_features(fe, x)
            return float(netcore.forward_probs(clf, feats)[:, 2].sum())

        coord_rng = np.random.default_rng(7)
        for _ in range(30):
            idx = int(coord_rng.integers(x.size))
            numeric = fd_loss_grad(prob_sum, x, idx)
            assert rel_err(float(g.flat[idx]), numeric) < FD_TOL

    def test_class_index_out_of_range(self):
        rng = np.random.default_rng(8)
        fe, clf = small_net(rng)
        with pytest.raises(ValueError):
            netcore.grad_wrt_input(fe, clf, np.ones((1, 3)), 9)


def test_feature_jacobian_matches_finite_differences():
    rng = np.random.default_rng(9)
    fe, _ = small_net(rng)
    x = rng.normal(size=3)
    jac = netcore.feature_jacobian(fe, x)
    assert jac.shape == (4, 3)
    xm = x[None, :].copy()
    for k in range(4):
        for j in range(3):
            def unit():
                return float(netcore.forward_features(fe, xm)[0, k])
            numeric = fd_loss_grad(unit, xm, j)
            assert rel_err(float(jac[k, j]), numeric) < FD_TOL


class TestInit:
    def test_uniform_bounds_and_zero_biases(self):
        rng = np.random.default_rng(10)
        fe = netcore.init_feature_extractor([20, 30, 10], "relu", rng)
        limit0 = np.sqrt(6.0 / (20 + 30))
        assert np.abs(fe.weights[0]).max() <= limit0
        assert np.abs(fe.weights[0]).max() > limit0 * 0.8  # actually spans the range
        np.testing.assert_allclose(fe.biases[0], 0.0)
        np.testing.assert_allclose(fe.biases[1], 0.0)

    def test_dims_chain(self):
        fe = netcore.init_feature_extractor([2, 8, 5], "tanh")
        assert fe.weights[0].shape == (8, 2)
        assert fe.weights[1].shape == (5, 8)
        assert fe.feature_dim == 5

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            netcore.init_feature_extractor([2, 3], "gelu")

    def test_too_few_dims(self):
        with pytest.raises(ValueError):
            netcore.init_feature_extractor([4])


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        mats = [rng.normal(size=(3, 4)), rng.normal(size=(1, 1)), rng.normal(size=(5, 2))]
        path = tmp_path / "model.ckpt"
        netcore.save_matrices(path, mats)
        loaded = netcore.load_matrices(path)
        assert len(loaded) == 3
        for a, b in zip(mats, loaded):
            assert a.tobytes() == b.tobytes()

    def test_save_load_save_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(12)
        mats = [rng.normal(size=(4, 4))]
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        netcore.save_matrices(p1, mats)
        netcore.save_matrices(p2, netcore.load_matrices(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            netcore.load_matrices(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        netcore.save_matrices(path, [np.ones((4, 4))])
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            netcore.load_matrices(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "vers.ckpt"
        netcore.save_matrices(path, [np.ones((1, 1))])
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            netcore.load_matrices(path)

    def test_model_matrices_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        fe, clf = small_net(rng)
        path = tmp_path / "m.ckpt"
        netcore.save_matrices(path, netcore.model_matrices(fe, clf))
        fe2, clf2 = small_net(np.random.default_rng(99))
        netcore.assign_model_matrices(fe2, clf2, netcore.load_matrices(path))
        for a, b in zip(netcore.model_matrices(fe, clf), netcore.model_matrices(fe2, clf2)):
            np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_on_assign(self, tmp_path):
        rng = np.random.default_rng(14)
        fe, clf = small_net(rng)
        path = tmp_path / "m.ckpt"
        netcore.save_matrices(path, netcore.model_matrices(fe, clf))
        fe3 = netcore.init_feature_extractor([3, 6, 4], "tanh", rng)
        clf3 = netcore.init_classifier(4, 3, rng)
        with pytest.raises(CheckpointError):
            netcore.assign_model_matrices(fe3, clf3, netcore.load_matrices(path))
