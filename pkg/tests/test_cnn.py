import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gfnoma.cnn import layers
from gfnoma.cnn.estimator import (CnnActivityDetector, TrainConfig, augment_batch,
                                  channel_statistics, hypothesis_test, input_to_tensor,
                                  tensor_to_input, train)
from gfnoma.cnn.network import (AdamState, CnnParameters, adam_step, backward, bce_loss,
                                bce_with_logits, default_architecture, forward, forward_logits,
                                init_parameters, logit_gradient, zero_parameters)
from gfnoma.frontend import decorrelate_frames
from gfnoma.simulator import PowerProfile, gen_spreading, simulate_frames


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def numeric_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def tiny_shapes(n=20, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield dict(B=int(rng.integers(1, 4)), C=int(rng.integers(1, 4)), H=int(rng.integers(1, 5)),
                   W=int(rng.integers(1, 5)), O=int(rng.integers(1, 4)),
                   k=(int(rng.choice([1, 3])), int(rng.choice([1, 3]))),
                   seed=int(rng.integers(2**31)))


class TestLayerGradients:
    @pytest.mark.parametrize("s", list(tiny_shapes()), ids=lambda s: f"{s['B']}x{s['C']}x{s['H']}x{s['W']}-{s['k']}")
    def test_conv(self, s):
        rng = np.random.default_rng(s["seed"])
        x = rng.standard_normal((s["B"], s["C"], s["H"], s["W"]))
        W = rng.standard_normal((s["O"], s["C"]) + s["k"])
        b = rng.standard_normal(s["O"])
        probe = rng.standard_normal((s["B"], s["O"], s["H"], s["W"]))
        f = lambda: float(np.sum(layers.conv2d_forward(x, W, b) * probe))
        dx, dW, db = layers.conv2d_backward(probe, x, W)
        assert rel_err(dx, numeric_grad(f, x)) < 1e-4
        assert rel_err(dW, numeric_grad(f, W)) < 1e-4
        assert rel_err(db, numeric_grad(f, b)) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_dense_relu_pool(self, seed):
        rng = np.random.default_rng(seed)
        B, C, H, Wd, U = (int(v) for v in rng.integers(1, 5, 5))
        x = rng.standard_normal((B, C, H, Wd))
        probe = rng.standard_normal((B, C, H))
        f = lambda: float(np.sum(layers.mean_pool_forward(layers.relu_forward(x)) * probe))
        d = layers.relu_backward(layers.mean_pool_backward(probe, x), x)
        assert rel_err(d, numeric_grad(f, x)) < 1e-4
        v = rng.standard_normal((B, C))
        W, b = rng.standard_normal((U, C)), rng.standard_normal(U)
        pr = rng.standard_normal((B, U))
        g = lambda: float(np.sum(layers.dense_forward(v, W, b) * pr))
        dv, dW, db = layers.dense_backward(pr, v, W)
        for ana, var in ((dv, v), (dW, W), (db, b)):
            assert rel_err(ana, numeric_grad(g, var)) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_full_network(self, seed):
        rng = np.random.default_rng(seed)
        M, K, Ns = (int(v) for v in rng.integers(1, 4, 3))
        arch = default_architecture(K, conv_channels=(2, 3), kernel_size=(3, 3), hidden_units=5)
        params = init_parameters(arch, (2 * M, K, Ns), rng)
        for _, _, a in params.arrays():
            a += 0.1 * rng.standard_normal(a.shape)   # non-zero biases too
        x = rng.standard_normal((3, 2 * M, K, Ns))
        y = rng.integers(0, 2, (3, K))
        _, grads = backward(params, x, y)
        f = lambda: bce_with_logits(forward_logits(params, x), y)
        for i, name, a in params.arrays():
            assert rel_err(grads[i][name], numeric_grad(f, a)) < 1e-4, (i, name)


class TestForward:
    def test_zero_weights_half(self):
        arch = default_architecture(3, (2,), (1, 3), 4)
        p = zero_parameters(arch, (2, 3, 4))
        np.testing.assert_array_equal(forward(p, np.ones((5, 2, 3, 4))), 0.5)

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
    def test_range(self, seed, scale):
        rng = np.random.default_rng(seed)
        p = init_parameters(default_architecture(2, (2,), (1, 3), 3), (2, 2, 3), rng)
        out = forward(p, scale * rng.standard_normal((4, 2, 2, 3)))
        assert np.all((out > 0) & (out < 1))

    def test_hand_computed(self):
        arch = default_architecture(2, conv_channels=(1,), kernel_size=(1, 1), hidden_units=0)
        p = zero_parameters(arch, (2, 2, 3))
        p.weights[0]["W"][:] = np.array([0.5, -1.0]).reshape(1, 2, 1, 1)
        p.weights[0]["b"][:] = 0.25
        p.weights[4]["W"][:] = np.array([[1.0, 2.0], [-1.0, 0.5]])
        p.weights[4]["b"][:] = np.array([0.1, -0.2])
        x = np.array([[[1.0, 2.0, -3.0], [0.0, 4.0, 1.0]],
                      [[0.5, -1.0, 2.0], [1.0, 1.0, -2.0]]])[None]
        # conv then ReLU, by hand, per (device, symbol)
        h = [[max(0.5 * x[0, 0, k, j] - x[0, 1, k, j] + 0.25, 0) for j in range(3)]
             for k in range(2)]
        pooled = [sum(r) / 3 for r in h]
        z = [1.0 * pooled[0] + 2.0 * pooled[1] + 0.1, -pooled[0] + 0.5 * pooled[1] - 0.2]
        expected = [1 / (1 + math.exp(-v)) for v in z]
        np.testing.assert_allclose(forward(p, x)[0], expected, rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        p = zero_parameters(default_architecture(2, (1,), (1, 1), 0), (2, 2, 3))
        with pytest.raises(ValueError):
            forward(p, np.zeros((1, 2, 2, 4)))


class TestLoss:
    def test_perfect(self):
        a = np.array([[1, 0, 1, 1]])
        assert bce_loss(a.astype(float), a) <= 4 * 1e-6

    def test_half(self):
        assert bce_loss(np.full((3, 5), 0.5), np.zeros((3, 5))) == pytest.approx(5 * math.log(2))

    def test_naive_sum(self, rng):
        p = rng.uniform(0.01, 0.99, (4, 3))
        a = rng.integers(0, 2, (4, 3))
        naive = 0.0
        for i in range(4):
            for k in range(3):
                naive -= a[i, k] * math.log(p[i, k]) + (1 - a[i, k]) * math.log(1 - p[i, k])
        assert bce_loss(p, a) == pytest.approx(naive / 4)
        z = np.log(p / (1 - p))
        assert bce_with_logits(z, a) == pytest.approx(naive / 4)

    def test_logit_gradient_identity(self, rng):
        z = rng.standard_normal((6, 3))
        a = rng.integers(0, 2, (6, 3))
        np.testing.assert_allclose(logit_gradient(z, a), (layers.sigmoid(z) - a) / 6)

    def test_stationary_bias(self):
        arch = default_architecture(2, (1,), (1, 1), 0)
        p = zero_parameters(arch, (2, 2, 2))
        y = np.array([[1, 0], [0, 1]])
        _, grads = backward(p, np.ones((2, 2, 2, 2)), y)
        np.testing.assert_allclose(grads[-1]["b"], 0.0, atol=1e-15)


class TestAdam:
    def _p(self, value):
        arch = [{"kind": "flatten"}, {"kind": "dense", "units": 1}]
        p = CnnParameters(arch, (1, 1, 1), [{}, {"W": np.full((1, 1), value), "b": np.zeros(1)}])
        return p

    def test_zero_gradient(self):
        p = self._p(1.0)
        adam_step(p, [{}, {"W": np.zeros((1, 1)), "b": np.zeros(1)}], AdamState.zeros_like(p))
        assert p.weights[1]["W"][0, 0] == 1.0

    def test_first_step_sign(self):
        p = self._p(1.0)
        adam_step(p, [{}, {"W": np.full((1, 1), -3.7), "b": np.full(1, 0.2)}],
                  AdamState.zeros_like(p), lr=0.01)
        assert p.weights[1]["W"][0, 0] == pytest.approx(1.01, abs=1e-8)
        assert p.weights[1]["b"][0] == pytest.approx(-0.01, abs=1e-7)

    def test_two_steps_by_hand(self):
        p = self._p(0.0)
        st_ = AdamState.zeros_like(p)
        g = [{}, {"W": np.full((1, 1), 2.0), "b": np.zeros(1)}]
        adam_step(p, g, st_, lr=0.1)
        adam_step(p, g, st_, lr=0.1)
        # step 1: m=0.2, v=0.004 -> mhat=2, vhat=4 -> -0.1; step 2 identical ratios -> -0.1
        assert p.weights[1]["W"][0, 0] == pytest.approx(-0.2, abs=1e-7)
        assert st_.t == 2


class TestInputs:
    def test_channels(self, rng):
        R = rng.standard_normal((2, 3, 4, 5)) + 0j
        x = tensor_to_input(R)
        assert x.shape == (2, 6, 4, 5)
        assert np.all(x[:, 1::2] == 0)
        Rc = R + 1j * rng.standard_normal(R.shape)
        np.testing.assert_array_equal(input_to_tensor(tensor_to_input(Rc)), Rc)

    def test_standardization(self, small_frames):
        x = tensor_to_input(decorrelate_frames(small_frames))
        m, s = channel_statistics(x, center=True)
        z = (x - m[None, :, None, None]) / s[None, :, None, None]
        np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1, rtol=1e-10)
        m0, s0 = channel_statistics(x)
        assert np.all(m0 == 0)
        np.testing.assert_allclose(np.mean((x / s0[None, :, None, None]) ** 2, axis=(0, 2, 3)), 1)

    def test_augmentation_is_symmetry(self, rng):
        x = rng.standard_normal((3, 2, 4, 5))
        y = augment_batch(x, np.random.default_rng(0))
        for i in range(3):
            # every output column is +- some input column
            for j in range(5):
                col = y[i, :, :, j]
                assert any(np.allclose(col, s * x[i, :, :, c]) for c in range(5) for s in (1, -1))


class TestHypothesisTest:
    def test_basic(self):
        np.testing.assert_array_equal(hypothesis_test(np.array([0.9, 0.1])).a, [1, 0])
        np.testing.assert_array_equal(hypothesis_test(np.full((2, 3), 0.3), 0.3), 1)

    def test_monotone_tradeoff(self, rng):
        from gfnoma.metrics import ConfusionCounts, precision_recall_f1
        truth = rng.integers(0, 2, (200, 4))
        probs = np.clip(truth * 0.3 + rng.uniform(0, 0.7, truth.shape), 0.001, 0.999)
        recalls, tps, preds = [], [], []
        for t in np.linspace(0.01, 0.99, 50):
            cc = ConfusionCounts.from_predictions(hypothesis_test(probs, t), truth)
            recalls.append(precision_recall_f1(cc).recall)
            tps.append(cc.aggregate()[0])
            preds.append(cc.aggregate()[0] + cc.aggregate()[1])
        assert np.all(np.diff(recalls) <= 0) and np.all(np.diff(preds) <= 0)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            hypothesis_test(np.array([0.5]), 1.0)


def _task(n, K=3, M=1, Ns=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2 * M, K, Ns))
    y = (x[:, 0].mean(axis=-1) > 0).astype(np.uint8)
    return x, y


class TestTraining:
    def test_memorizes(self):
        x, _ = _task(100, K=3)
        y = np.random.default_rng(1).integers(0, 2, (100, 3)).astype(np.uint8)
        arch = default_architecture(3, (8, 16), (3, 3), 64)
        p = init_parameters(arch, x.shape[1:], np.random.default_rng(0))
        cfg = TrainConfig(learning_rate=3e-3, batch_size=20, epochs=200, patience=200,
                          augment=False)
        best, log = train(x, y, None, None, p, cfg)
        assert log[-1]["train_loss"] < 0.05 * 3 * math.log(2)

    def test_shuffled_labels_do_not_generalize(self):
        x, _ = _task(900, K=3, seed=2)
        rng = np.random.default_rng(3)
        y = (rng.random((900, 3)) < 0.3).astype(np.uint8)
        est = CnnActivityDetector(conv_channels=(4,), hidden_units=8, max_epochs=15, patience=3,
                                  random_state=0, dtype="float64", augment=False)
        est.fit(x[:600], y[:600], x[600:], y[600:])
        h = -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
        best = min(r["val_loss"] for r in est.training_log_)
        assert best >= 0.9 * 3 * h

    def test_seed_determinism_and_resume(self, tmp_path):
        x, y = _task(120, seed=4)
        kw = dict(conv_channels=(3,), hidden_units=6, max_epochs=4, patience=10, batch_size=16,
                  random_state=7)
        a = CnnActivityDetector(**kw).fit(x, y)
        b = CnnActivityDetector(**kw).fit(x, y)
        for (_, _, u), (_, _, v) in zip(a.params_.arrays(), b.params_.arrays()):
            np.testing.assert_array_equal(u, v)
        # interrupted after 2 epochs, then resumed
        state = tmp_path / "state.gfn"
        CnnActivityDetector(**dict(kw, max_epochs=2)).fit(x, y, state_path=state)
        c = CnnActivityDetector(**kw).fit(x, y, state_path=state, resume=True)
        assert c.training_log_ == a.training_log_
        for (_, _, u), (_, _, v) in zip(a.params_.arrays(), c.params_.arrays()):
            np.testing.assert_array_equal(u, v)

    def test_checkpoint_round_trip(self, tmp_path, small_frames):
        est = CnnActivityDetector(conv_channels=(3,), hidden_units=6, max_epochs=2)
        est.fit(small_frames, small_frames.activity)
        path = est.save(tmp_path / "m.ckpt", config_hash="abc")
        back = CnnActivityDetector.load(path)
        np.testing.assert_array_equal(back.predict_proba(small_frames),
                                      est.predict_proba(small_frames))
        assert back.config_hash_ == "abc" and back.get_params() == est.get_params()

    def test_learns_activity(self):
        codes = gen_spreading(6, 8, seed=1)
        pw = PowerProfile.homogeneous(6)
        fr = simulate_frames(1500, codes, pw, 2, 4, 0.4, 0.05, seed=3)
        est = CnnActivityDetector(max_epochs=15, random_state=1)
        est.fit(fr.subset(range(1200)), fr.activity[:1200])
        te = fr.subset(range(1200, 1500))
        trivial = np.mean(te.activity)          # always predicting "inactive"
        assert np.mean(est.predict(te) != te.activity) < 0.5 * trivial

    def test_device_permutation_consistency(self, rng):
        K, M, Ns = 4, 1, 3
        arch = default_architecture(K, (2,), (1, 3), 5)
        p = init_parameters(arch, (2 * M, K, Ns), rng)
        x = rng.standard_normal((5, 2 * M, K, Ns))
        y = rng.integers(0, 2, (5, K))
        perm = rng.permutation(K)
        # width-1 device kernels: a device permutation only reorders the flattened features
        q = p.copy()
        hidden = q.weights[4]["W"]          # dense over flattened (channels, devices)
        C = hidden.shape[1] // K
        idx = (np.arange(C)[:, None] * K + perm[None, :]).ravel()
        q.weights[4]["W"] = hidden[:, idx]
        q.weights[6]["W"] = p.weights[6]["W"][perm]
        q.weights[6]["b"] = p.weights[6]["b"][perm]
        a = bce_with_logits(forward_logits(p, x), y)
        b = bce_with_logits(forward_logits(q, x[:, :, perm]), y[:, perm])
        assert a == pytest.approx(b, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(train_fraction=0.5)
