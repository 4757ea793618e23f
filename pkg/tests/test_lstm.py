import math
import time
import zipfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moldxai.errors import ConfigError, ModelFormatError, StaleCacheError
from moldxai.lstm import (AdamState, LstmLayerParams, ModelParams, TrainConfig, adam_update,
                          backward, confusion_metrics, dropout_mask, evaluate, forward,
                          forward_flops, infer_logits, init_params, load_model,
                          lstm_cell_forward, save_model, train)
from moldxai.numerics import (RngStream, bce_loss, finite_difference_gradient,
                              max_relative_error, sigmoid)


def _mean_loss(model, X, y):
    p, _ = forward(X, model)
    return float(np.mean(bce_loss(p, y)))


def _toy_problem(n=48, T=10, D=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, T, D))
    y = (X[:, :, 0].mean(axis=1) > 0).astype(int)
    return X, y


class TestCell:
    def test_all_zero(self):
        layer = LstmLayerParams.zeros(3, 2)
        h, c, _ = lstm_cell_forward(np.ones(3), np.zeros(2), np.zeros(2), layer)
        assert np.array_equal(h, np.zeros(2)) and np.array_equal(c, np.zeros(2))

    def test_half_forget(self):
        layer = LstmLayerParams.zeros(4, 1)
        h, c, _ = lstm_cell_forward(np.array([5.0, -2.0, 0.3, 9.0]), np.zeros(1), np.ones(1),
                                    layer)
        assert c[0] == pytest.approx(0.5, abs=1e-15)
        assert h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-15)
        assert h[0] == pytest.approx(0.231059, abs=1e-6)

    def test_saturated_forget(self):
        layer = LstmLayerParams.zeros(2, 1)
        layer.b[1] = 10.0  # forget gate slot
        _, c, _ = lstm_cell_forward(np.zeros(2), np.zeros(1), np.array([2.0]), layer)
        assert c[0] == pytest.approx(2 * sigmoid(10.0), abs=1e-12)
        assert c[0] == pytest.approx(1.99991, abs=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            lstm_cell_forward(np.zeros(4), np.zeros(2), np.zeros(2), LstmLayerParams.zeros(3, 2))

    def test_matches_layer_forward(self, small_model):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(1, 6, 5))
        _, cache = forward(X, small_model)
        layer = small_model.layers[0]
        h, c = np.zeros(8), np.zeros(8)
        for t in range(6):
            h, c, _ = lstm_cell_forward(X[0, t], h, c, layer)
        np.testing.assert_allclose(h, cache.layers[0].h[0, -1], atol=1e-14)


class TestForward:
    def test_zero_head(self, small_model):
        small_model.w_out[:] = 0.0
        small_model.b_out = 0.0
        p, _ = forward(np.random.default_rng(0).normal(size=(4, 7, 5)), small_model)
        assert np.array_equal(p, np.full(4, 0.5))

    def test_infer_deterministic(self, small_model):
        X = np.random.default_rng(0).normal(size=(3, 9, 5))
        assert np.array_equal(forward(X, small_model)[0], forward(X, small_model)[0])

    def test_train_mode_without_dropout_equals_infer(self, small_model):
        X = np.random.default_rng(0).normal(size=(3, 9, 5))
        p_train, _ = forward(X, small_model, "train", RngStream(0), (0.0, 0.0, 0.0))
        assert np.array_equal(p_train, forward(X, small_model)[0])

    def test_p_is_sigmoid_of_logit(self, small_model):
        X = np.random.default_rng(0).normal(size=(3, 9, 5))
        p, cache = forward(X, small_model)
        assert np.array_equal(p, sigmoid(cache.s))
        assert cache.layers[0].h.shape == (3, 9, 8)
        assert cache.layers[2].gates.shape == (3, 9, 16)

    def test_infer_logits_agree(self, small_model):
        X = np.random.default_rng(2).normal(size=(5, 11, 5))
        np.testing.assert_allclose(infer_logits(X, small_model), forward(X, small_model)[1].s,
                                   rtol=0, atol=1e-13)

    def test_wrong_feature_count(self, small_model):
        with pytest.raises(ConfigError):
            forward(np.zeros((1, 4, 6)), small_model)

    def test_nonfinite_activation_reports_location(self, small_model):
        X = np.zeros((1, 4, 5))
        X[0, 2, 0] = np.nan
        with pytest.raises(ArithmeticError, match="layer 1 at time step 2"):
            forward(X, small_model)

    def test_single_step_sequence(self, small_model):
        p, _ = forward(np.ones((2, 1, 5)), small_model)
        assert p.shape == (2,)


class TestBackward:
    def test_parameter_gradients(self, small_model):
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(3, 12, 5)), np.array([1, 0, 1])
        _, cache = forward(X, small_model)
        g = backward(cache, small_model, "loss", y)
        for arr, ga in zip(small_model.tensors(), g.tensors()):
            orig = arr.copy()

            def f(v, arr=arr):
                arr[...] = v
                return _mean_loss(small_model, X, y)

            fd = finite_difference_gradient(f, orig)
            arr[...] = orig
            assert max_relative_error(fd, ga, floor=1e-6) <= 1e-4

        def f_bias(v):
            m = small_model.copy()
            m.b_out = float(v[0])
            return _mean_loss(m, X, y)

        fd = finite_difference_gradient(f_bias, np.array([small_model.b_out]))
        assert max_relative_error(fd[0], g.b_out, floor=1e-6) <= 1e-4

    def test_input_and_hidden_gradients(self, small_model):
        X = np.random.default_rng(1).normal(size=(2, 12, 5))
        _, cache = forward(X, small_model)
        g = backward(cache, small_model, "logit")
        fd = finite_difference_gradient(lambda v: forward(v, small_model)[1].s.sum(), X)
        assert max_relative_error(fd, g.dx, floor=1e-6) <= 1e-4
        for k in range(3):
            H = small_model.layers[k].hidden_size

            def f(off, k=k):
                offs = [None] * 3
                offs[k] = off
                return forward(X, small_model, h_offsets=offs)[1].s.sum()

            fd = finite_difference_gradient(f, np.zeros((2, 12, H)))
            assert max_relative_error(fd, g.dh[k], floor=1e-6) <= 1e-4

    def test_zero_head_blocks_gradient(self, small_model):
        small_model.w_out[:] = 0.0
        X = np.random.default_rng(0).normal(size=(4, 6, 5))
        _, cache = forward(X, small_model)
        g = backward(cache, small_model, "loss", np.array([1, 0, 1, 0]))
        for ga in g.tensors()[:-1]:
            assert not ga.any()
        assert g.w_out.any()

    def test_stale_cache(self, small_model):
        X = np.zeros((1, 3, 5))
        _, cache = forward(X, small_model)
        small_model.layers[0].W[0, 0] += 1.0
        with pytest.raises(StaleCacheError):
            backward(cache, small_model, "logit")

    def test_dropout_masks_enter_gradient(self, small_model):
        rng = np.random.default_rng(3)
        X, y = rng.normal(size=(2, 5, 5)), np.array([0, 1])
        rates = (0.3, 0.3, 0.2)
        _, cache = forward(X, small_model, "train", RngStream(9), rates)
        g = backward(cache, small_model, "loss", y)
        W = small_model.layers[1].W
        orig = W.copy()

        def f(v):
            W[...] = v
            p, _ = forward(X, small_model, "train", RngStream(9), rates)
            return float(np.mean(bce_loss(p, y)))

        fd = finite_difference_gradient(f, orig)
        W[...] = orig
        assert max_relative_error(fd, g.layers[1].W, floor=1e-6) <= 1e-4


class TestAdam:
    def test_first_step(self):
        theta, _, _ = adam_update(np.zeros(1), np.array([0.5]), np.zeros(1), np.zeros(1),
                                  0.001325, 1)
        assert theta[0] == pytest.approx(-0.001325, rel=1e-6)

    def test_zero_gradient(self):
        theta, _, _ = adam_update(np.arange(4.0), np.zeros(4), np.zeros(4), np.zeros(4), 0.01, 1)
        assert np.array_equal(theta, np.arange(4.0))

    def test_symmetric_gradients(self):
        theta = np.zeros(2)
        m, v = np.zeros(2), np.zeros(2)
        for t in range(1, 4):
            theta, m, v = adam_update(theta, np.array([0.7, -0.7]), m, v, 0.01, t)
        assert theta[0] == -theta[1] and theta[0] < 0

    def test_state_shapes(self, small_model):
        st_ = AdamState.zeros_like(small_model)
        assert [a.shape for a in st_.m] == [t.shape for t in small_model.tensors()]


class TestDropout:
    def test_expectation_matches_infer(self):
        # a fixed small layer output; average of 10,000 inverted-dropout masks
        h = np.random.default_rng(0).uniform(0.2, 1.0, size=(2, 3, 4))
        rng = RngStream(5)
        acc = np.zeros_like(h)
        n = 10_000
        for _ in range(n):
            acc += h * dropout_mask(rng, h.shape, 0.20181)
        assert np.max(np.abs(acc / n - h) / h) <= 0.02

    def test_rate_zero_is_identity(self):
        assert np.array_equal(dropout_mask(RngStream(0), (3, 2), 0.0), np.ones((3, 2)))


class TestMetrics:
    def test_all_correct(self):
        m = confusion_metrics([1, 0, 1, 0], [1, 0, 1, 0])
        assert (m.accuracy, m.f1) == (1.0, 1.0)

    def test_counts(self):
        y_true = [1] * 4 + [0] * 1 + [1] * 1 + [0] * 4
        y_pred = [1] * 4 + [1] * 1 + [0] * 1 + [0] * 4
        m = confusion_metrics(y_true, y_pred)
        assert (m.tp, m.fp, m.fn, m.tn) == (4, 1, 1, 4)
        assert m.accuracy == pytest.approx(0.8) and m.f1 == pytest.approx(0.8)

    def test_all_negative_on_positive_data(self):
        m = confusion_metrics([1, 1, 1], [0, 0, 0])
        assert (m.accuracy, m.f1) == (0.0, 0.0)

    def test_positive_label_switch(self):
        m = confusion_metrics([0, 0, 1], [0, 1, 1], positive_label=0)
        assert m.tp == 1 and m.fn == 1 and m.fp == 0

    def test_evaluate_threshold(self, small_model):
        small_model.w_out[:] = 0.0
        small_model.b_out = 0.0  # p == 0.5 exactly -> predicted 1
        m = evaluate(small_model, np.zeros((2, 3, 5)), np.array([1, 1]))
        assert m.accuracy == 1.0


class TestFlops:
    @given(st.integers(1, 30), st.integers(1, 30))
    def test_monotone_in_features(self, a, b):
        if a == b:
            return
        lo, hi = sorted((a, b))
        m_lo = init_params(list(range(lo)), (8, 4, 4), 0)
        m_hi = init_params(list(range(hi)), (8, 4, 4), 0)
        assert forward_flops(m_lo, 20) < forward_flops(m_hi, 20)


class TestTrain:
    def test_zero_epochs(self):
        X, y = _toy_problem()
        cfg = TrainConfig(hidden_sizes=(6, 4, 4), epochs=0, seed=3)
        model, history = train(X, y, X, y, cfg)
        assert history == []
        ref = init_params(list(range(3)), (6, 4, 4), 3)
        for a, b in zip(model.tensors(), ref.tensors()):
            assert np.array_equal(a, b)

    def test_bit_identical_history(self):
        X, y = _toy_problem()
        cfg = TrainConfig(hidden_sizes=(6, 4, 4), epochs=3, batch_size=16, seed=1)
        m1, h1 = train(X, y, X, y, cfg)
        m2, h2 = train(X, y, X, y, cfg)
        assert h1 == h2
        assert all(np.array_equal(a, b) for a, b in zip(m1.tensors(), m2.tensors()))

    def test_input_order_does_not_matter(self):
        X, y = _toy_problem()
        ids = [f"c{i:03d}" for i in range(len(X))]
        perm = np.random.default_rng(0).permutation(len(X))
        cfg = TrainConfig(hidden_sizes=(6, 4, 4), epochs=2, batch_size=16, seed=1)
        m1, h1 = train(X, y, X, y, cfg, ids=ids)
        m2, h2 = train(X[perm], y[perm], X, y, cfg, ids=[ids[i] for i in perm])
        assert h1 == h2
        assert all(np.array_equal(a, b) for a, b in zip(m1.tensors(), m2.tensors()))

    def test_seed_changes_result(self):
        X, y = _toy_problem()
        base = dict(hidden_sizes=(6, 4, 4), epochs=2, batch_size=16)
        m1, _ = train(X, y, X, y, TrainConfig(seed=1, **base))
        m2, _ = train(X, y, X, y, TrainConfig(seed=2, **base))
        assert not np.array_equal(m1.w_out, m2.w_out)

    def test_loss_decreases_and_learns(self):
        X, y = _toy_problem(n=96, T=8, D=3)
        cfg = TrainConfig(hidden_sizes=(8, 4, 4), epochs=40, batch_size=16, seed=0,
                          learning_rate=0.01, metrics_every=10)
        model, history = train(X, y, X, y, cfg)
        assert history[-1]["loss"] < history[0]["loss"]
        assert evaluate(model, X, y).accuracy >= 0.85
        assert [h["epoch"] for h in history] == [10, 20, 30, 40]
        assert history[-1]["val_accuracy"] == evaluate(model, X, y).accuracy

    def test_empty_dataset(self):
        with pytest.raises(ConfigError):
            train(np.zeros((0, 4, 2)), np.zeros(0, int), np.zeros((1, 4, 2)), np.zeros(1, int),
                  TrainConfig(hidden_sizes=(2, 2, 2), epochs=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(dropout_hidden=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs=-1)


class TestModelParams:
    def test_duplicate_subset_rejected(self):
        m = init_params([0, 1], (2, 2, 2), 0)
        with pytest.raises(ConfigError):
            ModelParams(m.layers, m.w_out, 0.0, [1, 1])

    def test_layer_size_chain(self):
        m = init_params([0, 1, 2], (5, 3, 2), 0)
        assert [l.input_size for l in m.layers] == [3, 5, 3]
        assert m.layers[0].U.shape == (20, 5)
        assert m.layers[0].b[5:10].tolist() == [1.0] * 5


class TestSerialization:
    def _trained(self):
        X, y = _toy_problem()
        cfg = TrainConfig(hidden_sizes=(6, 4, 4), epochs=2, batch_size=16, seed=4)
        model, _ = train(X, y, X, y, cfg, feature_subset=[2, 5, 7], feature_names=["a", "b", "c"])
        model.b_out = 0.1 + 1e-17 * 3  # a value with a long binary expansion
        return model, X, y

    def test_round_trip_bit_exact(self, tmp_path):
        model, X, y = self._trained()
        path = save_model(model, tmp_path / "m.npz")
        back = load_model(path)
        assert all(np.array_equal(a, b) for a, b in zip(model.tensors(), back.tensors()))
        assert back.b_out == model.b_out
        assert back.feature_subset == [2, 5, 7] and back.seed == 4
        assert back.feature_names == ["a", "b", "c"]
        assert evaluate(back, X, y) == evaluate(model, X, y)

    def test_identical_models_identical_bytes(self, tmp_path):
        model, _, _ = self._trained()
        a = save_model(model, tmp_path / "a.npz").read_bytes()
        time.sleep(2.1)  # zip timestamps have 2 s resolution
        assert save_model(model.copy(), tmp_path / "b.npz").read_bytes() == a

    def test_truncated_file(self, tmp_path):
        model, _, _ = self._trained()
        path = save_model(model, tmp_path / "m.npz")
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_version_mismatch(self, tmp_path):
        model, _, _ = self._trained()
        path = save_model(model, tmp_path / "m.npz")
        with zipfile.ZipFile(path) as zf:
            members = {n: zf.read(n) for n in zf.namelist()}
        members["header.json"] = members["header.json"].replace(b'"version": 1', b'"version": 99')
        with zipfile.ZipFile(path, "w") as zf:
            for n, d in members.items():
                zf.writestr(n, d)
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "nope.npz")
