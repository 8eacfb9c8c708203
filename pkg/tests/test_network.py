import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mpdl.network import (
    AdamHyperparams,
    AdamState,
    ArchitectureMismatch,
    TrainConfig,
    adam_step,
    adam_update,
    backward,
    cross_entropy,
    forward,
    init_model,
    load_model,
    predict_batch,
    predict_volume,
    save_model,
    softmax,
    train,
    zero_model,
)
from mpdl.signatures import CLASS_NAMES, PatchDataset
from mpdl.volume import BundleError, ChannelKind, ChannelMeta, MultiparametricVolume


def random_batch(n_channels, size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((size, n_channels, 5, 5)), rng.integers(0, 6, size=size)


def make_dataset(values, labels, val_values=None, val_labels=None, seed=0):
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_train = len(labels)
    if val_values is not None:
        values = np.concatenate([values, val_values])
        labels = np.concatenate([labels, val_labels])
    idx = np.arange(len(labels))
    return PatchDataset(
        values=values,
        centers=np.zeros((len(labels), 3), dtype=np.int64),
        labels=labels,
        class_counts=tuple(int(c) for c in np.bincount(labels, minlength=6)),
        seed=seed,
        train_idx=idx[:n_train],
        val_idx=idx[n_train:],
    )


def separable_clusters(per_class, seed, classes=(1, 4)):
    """Two classes of constant-ish 2-channel patches around well separated means."""
    rng = np.random.default_rng(seed)
    means = {1: (0.2, 0.8), 4: (0.8, 0.2)}
    vals, labs = [], []
    for c in classes:
        mu = np.array(means[c])[None, :, None, None]
        vals.append(mu + 0.05 * rng.standard_normal((per_class, 2, 5, 5)))
        labs.append(np.full(per_class, c))
    return np.concatenate(vals), np.concatenate(labs)


class TestInit:
    def test_deterministic(self):
        assert init_model(4, 11).equals(init_model(4, 11))
        assert not init_model(4, 11).equals(init_model(4, 12))

    def test_shapes(self):
        m = init_model(4, 0)
        w1, b1 = m.conv_layers[0]
        assert w1.shape == (128, 4, 3, 3) and w1.size == 4608 and b1.shape == (128,)
        assert [w.shape[0] for w, _ in m.conv_layers] == [128, 64, 32, 16]
        assert m.fc_weight.shape == (6, 400) and m.fc_bias.shape == (6,)

    def test_biases_zero_and_he_bound(self):
        m = init_model(3, 5)
        for w, b in m.conv_layers:
            assert np.all(b == 0)
            bound = math.sqrt(6.0 / (w.shape[1] * 9))
            assert np.abs(w).max() <= bound
            # bound is actually reached in distribution
            assert np.abs(w).max() > 0.9 * bound
        assert np.all(m.fc_bias == 0)
        assert np.abs(m.fc_weight).max() <= math.sqrt(6.0 / 400)


class TestForward:
    def test_zero_model_uniform(self):
        probs, _ = forward(zero_model(3), random_batch(3, 5)[0])
        np.testing.assert_array_equal(probs, np.full((5, 6), 1 / 6))

    def test_rows_sum_to_one(self):
        probs, _ = forward(init_model(4, 1), random_batch(4, 32)[0])
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0)

    @settings(max_examples=100)
    @given(st.lists(st.floats(-1e4, 1e4), min_size=6, max_size=6))
    def test_softmax_extreme_logits(self, row):
        p = softmax(np.array([row]))
        assert np.all(np.isfinite(p)) and np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_single_filter_matches_direct_convolution(self):
        # one 1-channel conv with a single filter, then FC
        m = init_model(1, 3, conv_filters=(1,))
        rng = np.random.default_rng(9)
        m = m.replace_params([rng.normal(size=p.shape) for p in m.params])
        batch = rng.normal(size=(4, 1, 5, 5))
        np.testing.assert_allclose(forward(m, batch)[0], oracles.forward_direct(m.params, batch), atol=1e-13)

    def test_direct_convolution_oracle_by_hand(self):
        # 3x3 all-ones kernel on a 5x5 ramp, checked against explicit sums
        x = np.arange(25.0).reshape(1, 1, 5, 5)
        out = oracles.conv_same_direct(x, np.ones((1, 1, 3, 3)), np.zeros(1))
        assert out[0, 0, 2, 2] == sum(x[0, 0, 1:4, 1:4].ravel())
        assert out[0, 0, 0, 0] == x[0, 0, 0, 0] + x[0, 0, 0, 1] + x[0, 0, 1, 0] + x[0, 0, 1, 1]

    def test_mpdl_matches_direct_network(self):
        m = init_model(3, 2)
        batch, _ = random_batch(3, 6, seed=4)
        np.testing.assert_allclose(forward(m, batch)[0], oracles.forward_direct(m.params, batch), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ArchitectureMismatch):
            forward(init_model(4, 0), random_batch(3, 2)[0])


class TestCrossEntropy:
    def test_certain(self):
        p = np.zeros((1, 6))
        p[0, 2] = 1
        assert cross_entropy(p, [2]) == 0.0

    def test_uniform(self):
        assert cross_entropy(np.full((3, 6), 1 / 6), [0, 3, 5]) == pytest.approx(math.log(6), abs=1e-12)
        assert math.log(6) == pytest.approx(1.791759, abs=1e-6)

    def test_mean(self):
        p = np.array([[0.5, 0.5, 0, 0, 0, 0], [0.1, 0.9, 0, 0, 0, 0]])
        a, b = -math.log(0.5), -math.log(0.1)
        assert cross_entropy(p, [0, 0]) == pytest.approx((a + b) / 2, abs=1e-15)

    def test_floor(self):
        p = np.zeros((1, 6))
        p[0, 0] = 1
        assert cross_entropy(p, [1]) == pytest.approx(-math.log(1e-12))


class TestBackward:
    def test_matches_naive_finite_differences_small_arch(self):
        m = init_model(2, 0, conv_filters=(3, 2))
        batch, labels = random_batch(2, 4, seed=1)
        _, cache = forward(m, batch)
        grads = backward(m, cache, labels)
        fd = oracles.fd_gradients_naive(m.params, batch, labels)
        for g, n in zip(grads, fd):
            assert oracles.tensor_rel_error(g, n) < 1e-6
            np.testing.assert_allclose(g, n, atol=1e-8)

    def test_batched_oracle_agrees_with_naive(self):
        m = init_model(2, 4, conv_filters=(3, 2))
        batch, labels = random_batch(2, 3, seed=2)
        for a, b in zip(
            oracles.fd_gradients(m.params, batch, labels), oracles.fd_gradients_naive(m.params, batch, labels)
        ):
            np.testing.assert_allclose(a, b, atol=1e-9)

    def test_tied_logits_balanced_labels(self):
        m = zero_model(2)
        batch, _ = random_batch(2, 12)
        _, cache = forward(m, batch)
        grads = backward(m, cache, np.tile(np.arange(6), 2))
        np.testing.assert_allclose(grads[-1], 0.0, atol=1e-15)

    def test_unused_filter_has_zero_gradient(self):
        m = init_model(3, 7)
        fc_w = m.fc_weight.copy()
        dead = 5  # last-conv filter whose features the FC layer ignores
        fc_w[:, dead * 25 : (dead + 1) * 25] = 0.0
        params = list(m.params)
        params[-2] = fc_w
        m = m.replace_params(params)
        batch, labels = random_batch(3, 8)
        _, cache = forward(m, batch)
        grads = backward(m, cache, labels)
        assert np.all(grads[6][dead] == 0.0)
        assert grads[7][dead] == 0.0
        assert np.any(grads[6][dead - 1] != 0.0)

    def test_stale_cache(self):
        m1, m2 = init_model(2, 0), init_model(2, 1)
        batch, labels = random_batch(2, 3)
        _, cache = forward(m1, batch)
        with pytest.raises(ValueError, match="cache"):
            backward(m2, cache, labels)
        with pytest.raises(ValueError):
            backward(m1, cache, labels[:2])


class TestAdam:
    def test_first_step_magnitude(self):
        hyper = AdamHyperparams()
        for g in (1e-3, 1.0, 1e3, -5.0):
            params, _ = adam_update([np.zeros(())], AdamState.zeros_like([np.zeros(())]), [np.array(g)], hyper)
            step = abs(float(params[0]))
            assert step == pytest.approx(hyper.learning_rate * abs(g) / (abs(g) + hyper.epsilon), rel=1e-14)

    def test_scalar_two_steps_hand_recurrence(self):
        hyper = AdamHyperparams()
        theta = [np.zeros(())]
        state = AdamState.zeros_like(theta)
        for _ in range(2):
            theta, state = adam_update(theta, state, [np.ones(())], hyper)
        # hand evaluation: m1=0.1, v1=0.001 -> m_hat=v_hat=1; m2=0.19, v2=0.001999 -> again 1
        lr, b1, b2, eps = 0.001, 0.9, 0.999, 1e-8
        m = v = th = 0.0
        for t in (1, 2):
            m = b1 * m + (1 - b1) * 1.0
            v = b2 * v + (1 - b2) * 1.0
            th -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(float(theta[0]) - th) < 1e-12
        assert abs(float(theta[0]) - (-0.0019999999800000002)) < 1e-12
        assert state.t == 2

    def test_zero_gradient_identity(self):
        m = init_model(2, 0)
        state = AdamState.zeros_like(m.params)
        m2, state2 = adam_step(m, state, [np.zeros_like(p) for p in m.params], AdamHyperparams())
        assert m2.equals(m)
        assert state2.t == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_update([np.zeros(3)], AdamState.zeros_like([np.zeros(3)]), [np.zeros(2)], AdamHyperparams())

    def test_defaults(self):
        h = AdamHyperparams()
        assert (h.learning_rate, h.beta1, h.beta2, h.epsilon, h.minibatch) == (0.001, 0.9, 0.999, 1e-8, 1024)
        with pytest.raises(ValueError):
            AdamHyperparams(beta1=1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.integers(1, 5))
    def test_moments_match_recurrence(self, grads, steps):
        g = np.array(grads)
        hyper = AdamHyperparams()
        params, state = [np.zeros_like(g)], AdamState.zeros_like([g])
        m = np.zeros_like(g)
        v = np.zeros_like(g)
        for _ in range(steps):
            params, state = adam_update(params, state, [g], hyper)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
        np.testing.assert_allclose(state.m[0], m, rtol=1e-14, atol=0)
        np.testing.assert_allclose(state.v[0], v, rtol=1e-14, atol=0)
        assert state.t == steps


class TestTraining:
    def test_deterministic(self):
        x, y = separable_clusters(60, seed=0)
        vx, vy = separable_clusters(20, seed=1)
        ds = make_dataset(x, y, vx, vy)
        cfg = TrainConfig(max_epochs=2, seed=3, hyper=AdamHyperparams(minibatch=32))
        a, ha = train(init_model(2, 1), ds, cfg)
        b, hb = train(init_model(2, 1), ds, cfg)
        assert a.equals(b)
        assert ha.to_json() == hb.to_json()

    def test_separable_clusters_learned_within_five_epochs(self):
        x, y = separable_clusters(1500, seed=0)
        vx, vy = separable_clusters(200, seed=1)
        # independent oracle: nearest centroid on the mean signature is perfect
        sig = x.mean(axis=(2, 3))
        centroids = {c: sig[y == c].mean(axis=0) for c in (1, 4)}
        nc = np.array([min(centroids, key=lambda c: np.sum((s - centroids[c]) ** 2)) for s in sig])
        assert np.mean(nc == y) == 1.0

        ds = make_dataset(x, y, vx, vy)
        model, hist = train(init_model(2, 0), ds, TrainConfig(max_epochs=5, seed=0))
        assert hist.epochs <= 5
        acc = np.mean(predict_batch(model, x) == y)
        assert acc > 0.99

    def test_patience_stops_and_restores_best(self):
        x, y = separable_clusters(200, seed=0)
        # validation uses the opposite labelling, so its loss rises once training learns
        vx = x[::4]
        vy = np.where(y[::4] == 1, 4, 1)
        ds = make_dataset(x, y, vx, vy)
        hyper = AdamHyperparams(minibatch=64)
        model, hist = train(init_model(2, 0), ds, TrainConfig(max_epochs=10, patience=1, seed=0, hyper=hyper))
        assert hist.epochs == 2 and hist.stopped_early
        assert hist.val_loss[1] > hist.val_loss[0]
        assert hist.best_epoch == 1
        one, _ = train(init_model(2, 0), ds, TrainConfig(max_epochs=1, patience=1, seed=0, hyper=hyper))
        assert model.equals(one)

    def test_fixed_minibatch_descent(self):
        m = init_model(3, 0)
        batch, labels = random_batch(3, 64, seed=5)
        hyper = AdamHyperparams()
        state = AdamState.zeros_like(m.params)
        losses = []
        for _ in range(40):
            probs, cache = forward(m, batch)
            losses.append(cross_entropy(probs, labels))
            m, state = adam_step(m, state, backward(m, cache, labels), hyper)
        tail = np.array(losses[10:])
        assert np.all(np.diff(tail) <= 1e-6)
        assert tail[-1] < losses[0]

    def test_empty_split(self):
        x, y = separable_clusters(10, seed=0)
        with pytest.raises(ValueError, match="split"):
            train(init_model(2, 0), make_dataset(x, y), TrainConfig(max_epochs=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(patience=0)


def tiny_volume(n=2, dims=(6, 5, 2), seed=0):
    nx, ny, nz = dims
    data = np.random.default_rng(seed).random((n, nz, ny, nx))
    chans = [ChannelMeta(f"c{i}", ChannelKind.OTHER) for i in range(n)]
    return MultiparametricVolume(dims, (1, 1, 1), chans, data)


class TestPredict:
    def test_zero_model_labels_background(self):
        seg = predict_volume(zero_model(2), tiny_volume())
        assert seg.dims == (6, 5, 2)
        assert seg.legend == CLASS_NAMES
        assert np.all(seg.labels == 0)

    def test_matches_patchwise_argmax(self):
        from mpdl.signatures import extract_patch

        vol = tiny_volume()
        m = init_model(2, 3)
        seg = predict_volume(m, vol)
        for z, y, x in [(0, 0, 0), (1, 4, 5), (1, 2, 3)]:
            probs, _ = forward(m, extract_patch(vol, x, y, z).values[None])
            assert seg.labels[z, y, x] == int(np.argmax(probs[0]))

    def test_channel_mismatch(self):
        with pytest.raises(ArchitectureMismatch):
            predict_volume(init_model(3, 0), tiny_volume(n=2))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = init_model(4, 8)
        save_model(m, tmp_path / "ck", train_seed=1, epoch=3, val_loss=0.5)
        loaded, header = load_model(tmp_path / "ck")
        assert loaded.equals(m)
        assert header["init_seed"] == 8 and header["epoch"] == 3
        assert header["arch"]["conv_filters"] == [128, 64, 32, 16]
        assert (tmp_path / "ck" / "params.raw").stat().st_size == 8 * m.n_params()

    def test_payload_order(self, tmp_path):
        m = init_model(2, 1)
        save_model(m, tmp_path / "ck")
        raw = np.frombuffer((tmp_path / "ck" / "params.raw").read_bytes(), dtype="<f8")
        np.testing.assert_array_equal(raw[: m.params[0].size], m.params[0].ravel())
        np.testing.assert_array_equal(raw[-6:], m.fc_bias)

    def test_truncated(self, tmp_path):
        save_model(init_model(2, 1), tmp_path / "ck")
        raw = tmp_path / "ck" / "params.raw"
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(BundleError):
            load_model(tmp_path / "ck")

    def test_missing(self, tmp_path):
        with pytest.raises(BundleError):
            load_model(tmp_path / "none")

    def test_wrong_channels(self, tmp_path):
        save_model(init_model(4, 1), tmp_path / "ck")
        with pytest.raises(ArchitectureMismatch):
            load_model(tmp_path / "ck", n_channels=7)
