import math

import numpy as np
import pytest

from layermatch import netcore, sslcore, trainer
from layermatch.data import Example
from layermatch.netcore import ClassifierParams, FeatureExtractorParams
from layermatch.trainer import MetricsRecord, ModelState, TrainConfig


def small_config(**kw):
    base = dict(
        total_iterations=200,
        eval_every=100,
        n_samples=208,
        test_samples=100,
        hidden_dims=(8, 8),
    )
    base.update(kw)
    return TrainConfig(**base)


def identity_model(clf_weight, clf_bias):
    fe = FeatureExtractorParams([np.eye(2)], [np.zeros((2, 1))], ["identity"])
    clf = ClassifierParams(np.asarray(clf_weight, float), np.asarray(clf_bias, float))
    return ModelState(fe, clf)


class TestCosineSchedule:
    def test_starts_at_eta0(self):
        assert trainer.cosine_lr(0, 5000, 0.03) == 0.03

    def test_final_value(self):
        expect = 0.03 * math.cos(7 * math.pi / 16)
        assert trainer.cosine_lr(5000, 5000, 0.03) == pytest.approx(expect, rel=1e-12)
        assert expect == pytest.approx(0.19509 * 0.03, rel=1e-4)

    def test_monotone_and_bounded(self):
        vals = [trainer.cosine_lr(k, 100, 0.5) for k in range(101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert all(0 < v <= 0.5 for v in vals)

    def test_beyond_total_rejected(self):
        with pytest.raises(ValueError):
            trainer.cosine_lr(101, 100, 0.1)

    def test_zero_total_degenerates_to_eta0(self):
        assert trainer.cosine_lr(0, 0, 0.2) == 0.2


class TestSgdStep:
    def test_plain_descent(self):
        p = np.array([1.0, 2.0])
        g = np.array([0.5, -0.5])
        new_p, _ = trainer.sgd_step(p, g, np.zeros(2), 0.1, 0.0, 0.0)
        np.testing.assert_allclose(new_p, [0.95, 2.05])

    def test_zero_grad_zero_decay_is_identity(self):
        p = np.array([3.0])
        new_p, v = trainer.sgd_step(p, np.zeros(1), np.zeros(1), 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(new_p, p)
        np.testing.assert_array_equal(v, 0.0)

    def test_second_displacement_gains_momentum(self):
        mu, lr = 0.9, 0.01
        p = np.array([0.0])
        g = np.array([2.0])
        v = np.zeros(1)
        p1, v = trainer.sgd_step(p, g, v, lr, mu, 0.0)
        p2, v = trainer.sgd_step(p1, g, v, lr, mu, 0.0)
        np.testing.assert_allclose(p1 - p2, lr * g * (1 + mu), rtol=1e-12)

    def test_weight_decay_pulls_toward_zero(self):
        p = np.array([10.0])
        new_p, _ = trainer.sgd_step(p, np.zeros(1), np.zeros(1), 0.1, 0.0, 0.5)
        assert new_p[0] == pytest.approx(10.0 - 0.1 * 5.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            trainer.sgd_step(np.zeros(2), np.zeros(3), np.zeros(2), 0.1, 0.9, 0.0)


class TestModelEma:
    def make_pair(self):
        rng = np.random.default_rng(0)
        cfg = small_config()
        ema = trainer.init_model(cfg, 2, rng)
        live = trainer.init_model(cfg, 2, rng)
        return ema, live

    def test_momentum_zero_copies_live(self):
        ema, live = self.make_pair()
        trainer.update_model_ema(ema, live, 0.0)
        for e, l in zip(ema.matrices(), live.matrices()):
            np.testing.assert_array_equal(e, l)

    def test_momentum_one_freezes(self):
        ema, live = self.make_pair()
        before = [m.copy() for m in ema.matrices()]
        trainer.update_model_ema(ema, live, 1.0)
        for e, b in zip(ema.matrices(), before):
            np.testing.assert_array_equal(e, b)

    def test_geometric_convergence(self):
        m = 0.995
        ema = identity_model(np.zeros((2, 2)), np.zeros((2, 1)))
        live = identity_model(np.ones((2, 2)), np.zeros((2, 1)))
        for _ in range(1000):
            trainer.update_model_ema(ema, live, m)
        gap = np.abs(ema.clf.weight - 1.0).max()
        assert gap < (m**1000) * 1.01
        assert gap > (m**1000) * 0.99

    def test_shape_mismatch(self):
        ema = identity_model(np.zeros((2, 2)), np.zeros((2, 1)))
        live = identity_model(np.zeros((3, 2)), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            trainer.update_model_ema(ema, live, 0.5)


class TestEvaluate:
    def test_constant_predictor_on_balanced_set(self):
        model = identity_model([[0.0, 0.0], [0.0, 0.0]], [[5.0], [0.0]])
        test = [Example(np.zeros(2), c, c) for c in (0, 1) for _ in range(25)]
        assert trainer.evaluate(model, test) == 0.5

    def test_tie_breaks_to_lowest_index(self):
        model = identity_model(np.zeros((2, 2)), np.zeros((2, 1)))
        test = [Example(np.zeros(2), 0, 0), Example(np.zeros(2), 1, 1)]
        assert trainer.evaluate(model, test) == 0.5  # both predicted class 0

    def test_perfect_linear_split(self):
        model = identity_model([[1.0, 0.0], [-1.0, 0.0]], [[0.0], [0.0]])
        test = [Example(np.array([2.0, 0.0]), 0, 0), Example(np.array([-2.0, 0.0]), 1, 1)]
        assert trainer.evaluate(model, test) == 1.0

    def test_empty_test_set_rejected(self):
        model = identity_model(np.zeros((2, 2)), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            trainer.evaluate(model, [])

    def test_random_model_near_chance(self):
        rng = np.random.default_rng(7)
        cfg = small_config()
        model = trainer.init_model(cfg, 2, rng)
        test = [
            Example(rng.normal(size=2), int(rng.integers(2)), int(rng.integers(2)))
            for _ in range(10_000)
        ]
        acc = trainer.evaluate(model, test)
        assert 0.45 <= acc <= 0.55


class TestGammaUpsilon:
    def crafted_pool(self):
        # logit margin is 2*x0, so sigma(2|x0|) is the confidence
        model = identity_model([[1.0, 0.0], [-1.0, 0.0]], [[0.0], [0.0]])
        pool = []
        # 12 confident points (|x0|=2 -> conf 0.982): 9 correct, 3 flipped
        for i in range(12):
            sign = 1.0 if i % 2 == 0 else -1.0
            pred_class = 0 if sign > 0 else 1
            truth = pred_class if i < 9 else 1 - pred_class
            pool.append(Example(np.array([2.0 * sign, 0.0]), None, truth))
        # 8 low-confidence points (conf ~0.55)
        for i in range(8):
            pool.append(Example(np.array([0.1, 0.0]), None, i % 2))
        return model, pool

    def test_definition_arithmetic(self):
        model, pool = self.crafted_pool()
        gamma, upsilon = trainer.compute_gamma_upsilon(
            model, pool, sslcore.fixed_threshold(0.9, 2)
        )
        assert gamma == 0.6
        assert upsilon == 0.75

    def test_unreachable_threshold(self):
        model, pool = self.crafted_pool()
        gamma, upsilon = trainer.compute_gamma_upsilon(
            model, pool, sslcore.fixed_threshold(1.0 - 1e-6, 2)
        )
        assert gamma == 0.0 and upsilon is None

    def test_half_threshold_admits_everything(self):
        model, pool = self.crafted_pool()
        x = np.array([ex.features for ex in pool])
        assert trainer.admitted_fraction(model, x, 0.5) == 1.0

    def test_empty_pool(self):
        model, _ = self.crafted_pool()
        assert trainer.compute_gamma_upsilon(model, [], sslcore.fixed_threshold(0.9, 2)) == (0.0, None)


class TestPrepareData:
    def test_default_split_sizes(self):
        bundle = trainer.prepare_data(TrainConfig())
        assert len(bundle.d_l) == 8
        assert len(bundle.d_u) == 2000
        assert len(bundle.test) == 1000
        labels = [ex.label for ex in bundle.d_l]
        assert labels.count(0) == 4 and labels.count(1) == 4
        assert all(ex.label is None for ex in bundle.d_u)

    def test_test_pool_disjoint_seed(self):
        bundle = trainer.prepare_data(TrainConfig())
        train_pts = {tuple(ex.features) for ex in bundle.d_l + bundle.d_u}
        test_pts = {tuple(ex.features) for ex in bundle.test}
        assert not train_pts & test_pts


class TestRun:
    def test_zero_iterations(self):
        res = trainer.run(small_config(total_iterations=0))
        assert res.metrics == []
        assert res.snapshots == []
        assert res.model is not None

    def test_eval_cadence(self):
        res = trainer.run(small_config(total_iterations=100, eval_every=30))
        assert [m.iteration for m in res.metrics] == [30, 60, 90, 100]
        assert [it for it, _ in res.snapshots] == [30, 60, 90, 100]

    def test_metrics_are_finite_and_bounded(self):
        cfg = small_config(method="layermatch", tau=0.7)
        res = trainer.run(cfg)
        for m in res.metrics:
            for v in (m.loss_s, m.loss_u, m.loss_ac, m.test_acc, m.gamma, m.tau, m.lr):
                assert math.isfinite(v)
            assert 0.0 <= m.test_acc <= 1.0
            assert 0.0 <= m.gamma <= 1.0
            assert 0.0 < m.lr <= cfg.lr
            if m.upsilon is not None:
                assert 0.0 <= m.upsilon <= 1.0

    def test_zero_weight_layermatch_matches_supervised(self):
        cfg_lm = small_config(method="layermatch", w_u=0.0, w_ac=0.0, total_iterations=300)
        cfg_sup = small_config(method="supervised_only", total_iterations=300)
        res_lm = trainer.run(cfg_lm)
        res_sup = trainer.run(cfg_sup)
        for a, b in zip(res_lm.model.matrices(), res_sup.model.matrices()):
            assert a.tobytes() == b.tobytes()
        assert [m.test_acc for m in res_lm.metrics] == [m.test_acc for m in res_sup.metrics]

    def test_same_seed_bit_identical(self):
        cfg = small_config(method="fixmatch", tau=0.8)
        res_a = trainer.run(cfg)
        res_b = trainer.run(cfg)
        assert res_a.metrics == res_b.metrics
        for a, b in zip(res_a.model.matrices(), res_b.model.matrices()):
            assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        res_a = trainer.run(small_config(seed=0))
        res_b = trainer.run(small_config(seed=1))
        assert any(
            a.tobytes() != b.tobytes()
            for a, b in zip(res_a.model.matrices(), res_b.model.matrices())
        )

    def test_nan_loss_aborts_with_iteration(self, monkeypatch):
        def poisoned(fe, clf, batch, aug, rng):
            return float("nan"), netcore.zeros_like_grads(fe, clf)

        monkeypatch.setattr(trainer.sslcore, "supervised_loss", poisoned)
        with pytest.raises(RuntimeError, match="iteration 0"):
            trainer.run(small_config(method="supervised_only", total_iterations=5))

    def test_pseudo_label_method_runs(self):
        res = trainer.run(small_config(method="pseudo_label", tau=0.7))
        assert len(res.metrics) == 2

    def test_adaptive_threshold_moves(self):
        cfg = small_config(
            method="fixmatch", threshold_kind="adaptive", tau=0.95, tau_momentum=0.9
        )
        res = trainer.run(cfg)
        assert res.policy.current_tau != cfg.tau

    def test_invalid_method_rejected(self):
        with pytest.raises(ValueError, match="method"):
            trainer.run(small_config(method="mixmatch"))


class TestMetricsCsv:
    def records(self):
        return [
            MetricsRecord(100, 0.5, 0.25, 1 / 3, 0.875, 0.6, 0.75, 0.95, 0.03),
            MetricsRecord(200, 0.1, 0.0, 0.0, 0.9, 0.0, None, 0.95, 0.0299),
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.csv"
        trainer.write_metrics_csv(self.records(), path)
        assert trainer.read_metrics_csv(path) == self.records()

    def test_header_and_empty_upsilon(self, tmp_path):
        path = tmp_path / "m.csv"
        trainer.write_metrics_csv(self.records(), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,loss_s,loss_u,loss_ac,test_acc,gamma,upsilon,tau,lr"
        assert lines[2].split(",")[6] == ""

    def test_foreign_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            trainer.read_metrics_csv(path)


class TestCheckpoints:
    def test_round_trip_and_stable_bytes(self, tmp_path):
        cfg = small_config(total_iterations=20, eval_every=20)
        res = trainer.run(cfg)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        trainer.save_checkpoint(p1, res.model)
        template = trainer.init_model(cfg, 2, np.random.default_rng(99))
        restored = trainer.load_checkpoint(p1, template)
        for a, b in zip(restored.matrices(), res.model.matrices()):
            assert a.tobytes() == b.tobytes()
        trainer.save_checkpoint(p2, restored)
        assert p1.read_bytes() == p2.read_bytes()

    def test_architecture_mismatch_rejected(self, tmp_path):
        res = trainer.run(small_config(total_iterations=1, eval_every=1))
        path = tmp_path / "a.ckpt"
        trainer.save_checkpoint(path, res.model)
        other = trainer.init_model(
            small_config(hidden_dims=(5, 5)), 2, np.random.default_rng(0)
        )
        with pytest.raises(netcore.CheckpointError):
            trainer.load_checkpoint(path, other)
