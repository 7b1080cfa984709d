import numpy as np
import pytest

from mixview import mov, nn
from mixview.baselines import avg_fusion_model


def const_mlp(in_dim: int, out_bias) -> nn.MLPParams:
    """Single affine layer with zero weights: output logits = bias."""
    out_bias = np.asarray(out_bias, dtype=np.float64)
    return nn.MLPParams(layers=(
        nn.LayerParams(np.zeros((len(out_bias), in_dim)), out_bias),
    ))


def fixed_model(gate_bias, expert_probs, dims=(2, 3)):
    """MoV whose gate and experts produce fixed distributions everywhere."""
    experts = tuple(
        const_mlp(d, np.log(np.asarray(p))) for d, p in zip(dims, expert_probs)
    )
    gate = const_mlp(sum(dims), gate_bias)
    return mov.MoVParams(gate=gate, experts=experts)


def random_batch(rng, dims, n, k=2):
    views = [rng.standard_normal((n, d)) for d in dims]
    labels = rng.integers(k, size=n)
    return views, labels


class TestForward:
    def test_degenerate_gate_selects_expert(self):
        params = fixed_model([1000.0, -1000.0], [(0.8, 0.2), (0.4, 0.6)])
        pred = mov.forward(params, [np.zeros(2), np.zeros(3)])
        assert pred.gate_weights == pytest.approx([1.0, 0.0], abs=0)
        assert np.array_equal(pred.mixture_dist, pred.expert_dists[0])

    def test_uniform_gate_averages(self):
        params = fixed_model([0.0, 0.0], [(0.8, 0.2), (0.4, 0.6)])
        pred = mov.forward(params, [np.zeros(2), np.zeros(3)])
        assert pred.mixture_dist == pytest.approx([0.6, 0.4], abs=1e-14)

    def test_single_view_reduction(self):
        expert = const_mlp(3, np.log([0.3, 0.7]))
        gate = const_mlp(3, [5.0])
        params = mov.MoVParams(gate=gate, experts=(expert,))
        pred = mov.forward(params, [np.zeros(3)])
        assert np.allclose(pred.mixture_dist, pred.expert_dists[0], atol=1e-15)

    def test_mixture_validity_bounds(self):
        rng = np.random.default_rng(1)
        for seed in range(20):
            params = mov.init_mov((3, 4), 2, (5,), (4,), seed=seed)
            pred = mov.forward(params, [rng.standard_normal(3), rng.standard_normal(4)])
            assert abs(pred.mixture_dist.sum() - 1.0) < 1e-12
            lo = pred.expert_dists.min(axis=0) - 1e-12
            hi = pred.expert_dists.max(axis=0) + 1e-12
            assert np.all(pred.mixture_dist >= lo) and np.all(pred.mixture_dist <= hi)

    def test_shape_error(self):
        params = mov.init_mov((3, 4), 2, (5,), (4,), seed=0)
        with pytest.raises(nn.ShapeError):
            mov.forward(params, [np.zeros(3)])
        with pytest.raises(nn.ShapeError):
            mov.forward(params, [np.zeros(3), np.zeros(5)])


class TestLogLikelihood:
    def test_uniform_everything(self):
        params = fixed_model([0.0, 0.0], [(0.5, 0.5), (0.5, 0.5)])
        views, labels = random_batch(np.random.default_rng(0), (2, 3), 6)
        assert mov.log_likelihood(params, (views, labels)) == pytest.approx(np.log(0.5))

    def test_single_sample_hand_value(self):
        # gate (0.5, 0.5); expert likelihoods for the true label 0.8 and 0.4
        params = fixed_model([0.0, 0.0], [(0.8, 0.2), (0.4, 0.6)])
        batch = ([np.zeros((1, 2)), np.zeros((1, 3))], np.array([0]))
        assert mov.log_likelihood(params, batch) == pytest.approx(np.log(0.6))

    def test_duplication_leaves_mean_unchanged(self):
        rng = np.random.default_rng(3)
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=2)
        views, labels = random_batch(rng, (2, 3), 5)
        ll = mov.log_likelihood(params, (views, labels))
        doubled = ([np.concatenate([v, v]) for v in views], np.concatenate([labels, labels]))
        assert mov.log_likelihood(params, doubled) == pytest.approx(ll, abs=1e-12)

    def test_empty_rejected(self):
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=0)
        with pytest.raises(nn.ConfigError):
            mov.log_likelihood(params, ([np.zeros((0, 2)), np.zeros((0, 3))], np.array([], dtype=int)))


class TestPosteriorWeights:
    def test_hand_value(self):
        params = fixed_model([0.0, 0.0], [(0.8, 0.2), (0.4, 0.6)])
        pred = mov.forward(params, [np.zeros(2), np.zeros(3)])
        w = mov.posterior_weights(pred, 0).w
        assert w == pytest.approx([2 / 3, 1 / 3], abs=1e-14)
        assert abs(w.sum() - 1.0) < 1e-12

    def test_identical_experts_give_gate_weights(self):
        params = fixed_model([0.3, -0.8], [(0.7, 0.3), (0.7, 0.3)])
        pred = mov.forward(params, [np.zeros(2), np.zeros(3)])
        w = mov.posterior_weights(pred, 1).w
        assert w == pytest.approx(pred.gate_weights, abs=1e-14)

    def test_degenerate_gate(self):
        params = fixed_model([1000.0, -1000.0], [(0.8, 0.2), (0.4, 0.6)])
        pred = mov.forward(params, [np.zeros(2), np.zeros(3)])
        assert mov.posterior_weights(pred, 1).w == pytest.approx([1.0, 0.0], abs=0)


class TestBackward:
    def test_symmetric_case_zeroes_gate_gradient(self):
        params = fixed_model([0.0, 0.0], [(0.7, 0.3), (0.7, 0.3)])
        views, labels = random_batch(np.random.default_rng(1), (2, 3), 4)
        _, grads = mov.backward(params, (views, labels), lam=0.0)
        for l in grads.gate.layers:
            assert np.all(np.abs(l.weights) < 1e-15) and np.all(np.abs(l.biases) < 1e-15)

    @pytest.mark.parametrize("lam", [0.0, 1.0, 5.0])
    def test_matches_finite_differences(self, lam):
        rng = np.random.default_rng(int(lam * 7) + 1)
        for trial in range(5):
            dims = [int(rng.integers(2, 5)) for _ in range(int(rng.integers(2, 4)))]
            params = mov.init_mov(dims, 2, (4,), (3,), seed=int(rng.integers(2**31)))
            batch = random_batch(rng, dims, int(rng.integers(2, 6)))
            _, grads = mov.backward(params, batch, lam)
            fd = mov.finite_diff_mov(
                lambda p: mov.composite_loss(p, batch, lam), params, 1e-5
            )
            a, f = mov.flatten_mov(grads), mov.flatten_mov(fd)
            rel = np.abs(a - f) / np.maximum.reduce(
                [np.abs(a), np.abs(f), np.full_like(a, 1e-4)]
            )
            assert rel.max() < 1e-6

    def test_dropout_with_pinned_masks(self):
        rng = np.random.default_rng(5)
        dims = (3, 4)
        params = mov.init_mov(dims, 2, (4,), (3,), seed=8)
        batch = random_batch(rng, dims, 4)
        caches = mov.forward_batch(params, batch[0], "train", 0.5, rng=rng)
        masks = mov.collect_masks(caches)
        _, grads = mov.backward(params, batch, 1.0, 0.5, masks=masks)
        fd = mov.finite_diff_mov(
            lambda p: mov.composite_loss(p, batch, 1.0, 0.5, masks=masks), params, 1e-5
        )
        a, f = mov.flatten_mov(grads), mov.flatten_mov(fd)
        rel = np.abs(a - f) / np.maximum.reduce([np.abs(a), np.abs(f), np.full_like(a, 1e-4)])
        assert rel.max() < 1e-6

    def test_large_lambda_limit(self):
        # expert gradients converge to lam * standalone per-view gradients
        rng = np.random.default_rng(11)
        dims = (3, 2)
        params = mov.init_mov(dims, 2, (4,), (3,), seed=4)
        batch = random_batch(rng, dims, 5)
        lam = 1e6
        _, grads = mov.backward(params, batch, lam)
        _, standalone = mov.backward(params, batch, 1.0)
        # standalone-only gradient: difference of lam=1 and lam=0 runs
        _, base = mov.backward(params, batch, 0.0)
        for i in range(2):
            g = nn.flatten_params(grads.experts[i]) / lam
            s = nn.flatten_params(standalone.experts[i]) - nn.flatten_params(base.experts[i])
            assert np.abs(g - s).max() < 1e-5 * max(1.0, np.abs(s).max())

    def test_lambda_zero_equals_log_likelihood(self):
        rng = np.random.default_rng(2)
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=1)
        batch = random_batch(rng, (2, 3), 6)
        assert abs(
            mov.composite_loss(params, batch, 0.0) - mov.log_likelihood(params, batch)
        ) < 1e-12

    def test_posterior_weighted_structure(self):
        # expert gradient of the mixture term equals the posterior-weighted
        # sum of standalone per-sample gradients, computed independently
        rng = np.random.default_rng(21)
        dims = (3, 4)
        params = mov.init_mov(dims, 2, (4,), (3,), seed=9)
        views, labels = random_batch(rng, dims, 5)
        n = len(labels)
        _, grads = mov.backward(params, (views, labels), lam=0.0)
        for i, expert in enumerate(params.experts):
            acc = None
            for t in range(n):
                sample_views = [v[t] for v in views]
                pred = mov.forward(params, sample_views)
                w = mov.posterior_weights(pred, int(labels[t])).w
                logits, cache = nn.mlp_forward(expert, sample_views[i])
                p = nn.softmax(logits)
                onehot = np.zeros_like(p)
                onehot[labels[t]] = 1.0
                g = nn.mlp_backward(expert, cache, (onehot - p) * w[i] / n)
                vec = nn.flatten_params(g)
                acc = vec if acc is None else acc + vec
            assert np.abs(acc - nn.flatten_params(grads.experts[i])).max() < 1e-10


class TestPredict:
    def test_argmax(self):
        params = fixed_model([0.0, 0.0], [(0.8, 0.2), (0.6, 0.4)])
        label, dist = mov.predict(params, [np.zeros(2), np.zeros(3)])
        assert label == 0
        assert dist == pytest.approx([0.7, 0.3], abs=1e-14)

    def test_exact_tie_goes_to_lowest_index(self):
        params = fixed_model([0.0, 0.0], [(0.5, 0.5), (0.5, 0.5)])
        label, _ = mov.predict(params, [np.zeros(2), np.zeros(3)])
        assert label == 0

    def test_degenerate_gate_follows_expert(self):
        params = fixed_model([-1000.0, 1000.0], [(0.8, 0.2), (0.1, 0.9)])
        label, _ = mov.predict(params, [np.zeros(2), np.zeros(3)])
        assert label == 1


def toy_batches(seed=0, n=20):
    """Linearly separable per-view toy data."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    sign = 2.0 * labels - 1.0
    views = [
        sign[:, None] * 2.0 + 0.1 * rng.standard_normal((n, d)) for d in (2, 3)
    ]
    return (views, labels), rng


class TestTrain:
    def test_zero_epochs_is_noop(self):
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=0)
        batch, _ = toy_batches()
        cfg = mov.TrainConfig(max_epochs=0, seed=0)
        out, hist = mov.train(params, batch, batch, cfg)
        assert out is params
        assert hist.train_loss == [] and hist.best_epoch == -1

    def test_loss_improves_on_separable_toy(self):
        params = mov.init_mov((2, 3), 2, (8,), (4,), seed=3)
        batch, _ = toy_batches(seed=3)
        cfg = mov.TrainConfig(max_epochs=30, learning_rate=1e-2, seed=3)
        _, hist = mov.train(params, batch, batch, cfg)
        first10 = hist.train_loss[:10]
        assert all(b < a for a, b in zip(first10, first10[1:]))

    def test_deterministic_histories(self):
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=1)
        batch, _ = toy_batches(seed=1)
        cfg = mov.TrainConfig(max_epochs=25, dropout_rate=0.3, seed=7)
        p1, h1 = mov.train(params, batch, batch, cfg)
        p2, h2 = mov.train(params, batch, batch, cfg)
        assert h1.train_loss == h2.train_loss
        assert h1.val_loss == h2.val_loss
        assert np.array_equal(mov.flatten_mov(p1), mov.flatten_mov(p2))

    def test_learning_rate_non_increasing(self):
        params = mov.init_mov((2, 3), 2, (4,), (3,), seed=1)
        batch, _ = toy_batches(seed=1)
        cfg = mov.TrainConfig(max_epochs=60, plateau_patience=3, seed=2)
        _, hist = mov.train(params, batch, batch, cfg)
        lrs = hist.learning_rate
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert len(hist.train_loss) <= 60

    def test_frozen_zero_gate_matches_avg_baseline_bitwise(self):
        rng = np.random.default_rng(4)
        dims = (3, 4)
        batch = random_batch(rng, dims, 30)
        val = random_batch(rng, dims, 10)
        cfg = mov.TrainConfig(max_epochs=15, freeze_gate=True, dropout_rate=0.2, seed=5)

        # gate shape must match avg_fusion_model's so dropout mask draws align
        base = mov.init_mov(dims, 2, (6,), seed=5)
        zero_gate = nn.MLPParams(layers=tuple(
            nn.LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases))
            for l in base.gate.layers
        ))
        frozen = mov.MoVParams(gate=zero_gate, experts=base.experts)
        trained, _ = mov.train(frozen, batch, val, cfg)

        avg = avg_fusion_model(dims, 2, (6,), seed=5)
        avg.fit(batch, val, mov.TrainConfig(max_epochs=15, dropout_rate=0.2, seed=5))

        probs_mov = mov.predict_batch(trained, val[0])
        probs_avg = avg.predict_proba(val[0])
        assert np.array_equal(probs_mov, probs_avg)
        # uniform-gate prediction is exactly the unweighted expert mean
        caches = mov.forward_batch(trained, val[0])
        mean_experts = np.exp(caches.log_expert).mean(axis=1)
        assert np.array_equal(probs_mov, mean_experts)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = mov.init_mov((3, 4), 2, (5, 5), (3,), seed=12)
        path = tmp_path / "model.mov1"
        mov.save_checkpoint(path, params, {"lam": 1.0, "seed": 12, "kind": "mov"})
        loaded, header = mov.load_checkpoint(path)
        assert np.array_equal(mov.flatten_mov(params), mov.flatten_mov(loaded))
        assert header["m"] == 2 and header["k"] == 2 and header["lam"] == 1.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.mov1"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(mov.CheckpointError):
            mov.load_checkpoint(path)
