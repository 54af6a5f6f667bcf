import numpy as np
import pytest

from dysfluency import numerics as nm
from dysfluency.losses import LossConfig, focal_multi
from dysfluency.model import (
    CheckpointError,
    ForwardOutput,
    HeadConfig,
    HeadParams,
    forward,
    forward_backward,
    init_head,
    load_checkpoint,
    param_shapes,
    predict,
    save_checkpoint,
    with_pooling,
)

SMALL = HeadConfig(feature_dim=8, projector_dim=4, num_classes=6, dropout_rate=0.1, seed=5)


def _random_features(rng, t=5, d=8):
    return rng.normal(size=(t, d))


class TestInit:
    def test_deterministic(self):
        a = init_head(SMALL)
        b = init_head(SMALL)
        for (_, ma), (_, mb) in zip(a.named(), b.named()):
            assert np.array_equal(ma.data, mb.data)

    def test_output_columns_match_num_classes(self):
        params = init_head(HeadConfig(feature_dim=8, projector_dim=4, num_classes=7))
        assert params.w_main.shape == (4, 7)
        assert params.b_main.shape == (1, 7)

    def test_different_seeds_differ(self):
        a = init_head(SMALL)
        b = init_head(HeadConfig(**{**SMALL.__dict__, "seed": 6}))
        assert any(
            not np.array_equal(ma.data, mb.data)
            for (_, ma), (_, mb) in zip(a.named(), b.named())
        )

    def test_biases_zero_and_bounds(self):
        params = init_head(SMALL)
        assert np.array_equal(params.b_proj.data, np.zeros((1, 4)))
        for name, m in params.named():
            if not name.startswith("b_"):
                bound = 1.0 / np.sqrt(m.rows)
                assert (np.abs(m.data) <= bound).all()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HeadConfig(aux_outputs=3)
        with pytest.raises(ValueError):
            HeadConfig(dropout_rate=1.0)
        with pytest.raises(ValueError):
            HeadConfig(pooling="max")


class TestForward:
    def test_single_frame_attention(self):
        rng = np.random.default_rng(0)
        params = init_head(SMALL)
        out = forward(params, _random_features(rng, t=1))
        assert np.array_equal(out.attn_weights, [1.0])

    def test_frame_permutation_invariance(self):
        rng = np.random.default_rng(1)
        params = init_head(SMALL)
        h = _random_features(rng, t=7)
        perm = rng.permutation(7)
        a = forward(params, h)
        b = forward(params, h[perm])
        assert np.allclose(a.main_probs, b.main_probs, atol=1e-12)
        assert np.allclose(a.aux_probs, b.aux_probs, atol=1e-12)
        assert np.allclose(a.attn_weights[perm], b.attn_weights, atol=1e-12)

    def test_output_ranges(self):
        rng = np.random.default_rng(2)
        params = init_head(SMALL)
        for _ in range(20):
            out = forward(params, _random_features(rng, t=int(rng.integers(1, 12))))
            assert ((out.main_probs > 0) & (out.main_probs < 1)).all()
            assert out.aux_probs.sum() == pytest.approx(1.0, abs=1e-12)
            assert out.attn_weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert (out.attn_weights >= 0).all()

    def test_width_mismatch_rejected(self):
        params = init_head(SMALL)
        with pytest.raises(nm.ShapeError):
            forward(params, np.zeros((3, 9)))

    def test_dropout_needs_rng(self):
        params = init_head(SMALL)
        with pytest.raises(ValueError):
            forward(params, np.zeros((2, 8)), train_mode=True)

    def test_eval_mode_deterministic(self):
        rng = np.random.default_rng(3)
        params = init_head(SMALL)
        h = _random_features(rng)
        a = forward(params, h)
        b = forward(params, h)
        assert np.array_equal(a.main_probs, b.main_probs)

    def test_mean_pooling_mode(self):
        rng = np.random.default_rng(4)
        params = with_pooling(init_head(SMALL), "mean")
        h = _random_features(rng, t=6)
        out = forward(params, h)
        assert np.allclose(out.attn_weights, np.full(6, 1.0 / 6.0))
        # mean pooling ignores the attention projections entirely
        params.w_q.data[:] = 0.0
        out2 = forward(params, h)
        assert np.array_equal(out.main_probs, out2.main_probs)

    def test_raw_mean_query_mode(self):
        rng = np.random.default_rng(5)
        cfg = HeadConfig(
            feature_dim=8, projector_dim=4, num_classes=6, seed=5, query_projection=False
        )
        params = init_head(cfg)
        h = _random_features(rng, t=4)
        out = forward(params, h)
        # zeroing w_q must not change anything in raw-mean mode
        params.w_q.data[:] = 0.0
        out2 = forward(params, h)
        assert np.array_equal(out.main_probs, out2.main_probs)


class TestPredict:
    def test_boundary_inclusive(self):
        assert np.array_equal(predict([0.9, 0.1, 0.5], 0.5), [1, 0, 1])

    def test_all_below_threshold(self):
        assert np.array_equal(predict([0.49, 0.49, 0.49], 0.5), [0, 0, 0])

    def test_high_threshold(self):
        assert np.array_equal(predict([0.77], 0.8), [0])

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            predict([0.5], 1.5)

    def test_monotone(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            probs = rng.uniform(0, 1, size=6)
            base = predict(probs, 0.5)
            i = int(rng.integers(0, 6))
            raised = probs.copy()
            raised[i] = min(1.0, raised[i] + float(rng.uniform(0, 0.5)))
            after = predict(raised, 0.5)
            assert (after >= base).all()


class TestForwardBackward:
    def test_single_clip_w_main_one_equals_focal(self):
        rng = np.random.default_rng(7)
        params = init_head(SMALL)
        h = _random_features(rng)
        labels = np.array([1, 0, 0, 1, 0, 0])
        cfg = LossConfig(alpha=0.7, gamma=3.0, w_main=1.0)
        loss, _ = forward_backward(params, [(h, labels, 1)], cfg)
        probs = forward(params, h).main_probs
        assert loss == pytest.approx(focal_multi(probs, labels, 0.7, 3.0), rel=1e-12)

    def test_duplicated_clip_same_loss(self):
        rng = np.random.default_rng(8)
        params = init_head(SMALL)
        h = _random_features(rng)
        labels = np.array([0, 1, 0, 0, 0, 1])
        cfg = LossConfig()
        l1, g1 = forward_backward(params, [(h, labels, 0)], cfg)
        l2, g2 = forward_backward(params, [(h, labels, 0), (h, labels, 0)], cfg)
        assert l2 == pytest.approx(l1, rel=1e-12)
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-12)

    def test_label_width_rejected(self):
        params = init_head(SMALL)
        with pytest.raises(ValueError):
            forward_backward(params, [(np.zeros((2, 8)), np.zeros(7), 0)], LossConfig())

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            forward_backward(init_head(SMALL), [], LossConfig())

    def test_none_aux_label_drops_aux_term(self):
        rng = np.random.default_rng(9)
        params = init_head(SMALL)
        h = _random_features(rng)
        labels = np.array([1, 0, 0, 0, 0, 0])
        cfg = LossConfig(w_main=0.9)
        loss, _ = forward_backward(params, [(h, labels, None)], cfg)
        probs = forward(params, h).main_probs
        assert loss == pytest.approx(0.9 * focal_multi(probs, labels, 0.7, 3.0), rel=1e-12)

    def test_deterministic_given_seeded_dropout(self):
        rng_h = np.random.default_rng(10)
        params = init_head(SMALL)
        batch = [(_random_features(rng_h), np.array([1, 0, 1, 0, 0, 0]), 1)]
        l1, g1 = forward_backward(
            params, batch, LossConfig(), dropout_rng=np.random.default_rng(42)
        )
        l2, g2 = forward_backward(
            params, batch, LossConfig(), dropout_rng=np.random.default_rng(42)
        )
        assert l1 == l2
        for name in g1:
            assert np.array_equal(g1[name], g2[name])


def _head_loss_fn(cfg, batch, loss_cfg):
    def f(x):
        params = HeadParams.from_vector(cfg, x)
        loss, grads = forward_backward(params, batch, loss_cfg)
        return loss, np.concatenate([grads[name].ravel() for name, _ in params.named()])

    return f


class TestGradients:
    @pytest.mark.parametrize("num_classes", [6, 7])
    @pytest.mark.parametrize("t", [1, 5])
    def test_full_head_gradients(self, num_classes, t):
        rng = np.random.default_rng(100 + num_classes + t)
        cfg = HeadConfig(
            feature_dim=8,
            projector_dim=4,
            num_classes=num_classes,
            dropout_rate=0.0,
            seed=int(rng.integers(0, 1000)),
        )
        params = init_head(cfg)
        batch = [
            (
                rng.normal(size=(t, 8)),
                rng.integers(0, 2, size=num_classes),
                int(rng.integers(0, 2)),
            )
            for _ in range(2)
        ]
        err = nm.grad_check(_head_loss_fn(cfg, batch, LossConfig()), params.to_vector())
        assert err < 1e-4, err

    def test_mean_pool_gradients(self):
        rng = np.random.default_rng(200)
        cfg = HeadConfig(
            feature_dim=8, projector_dim=4, num_classes=6, dropout_rate=0.0, pooling="mean"
        )
        params = init_head(cfg)
        batch = [(rng.normal(size=(5, 8)), rng.integers(0, 2, size=6), 0)]
        err = nm.grad_check(_head_loss_fn(cfg, batch, LossConfig()), params.to_vector())
        assert err < 1e-4, err


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_head(SMALL)
        path = tmp_path / "head.dysh"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)
        assert loaded.cfg == params.cfg
        for (_, a), (_, b) in zip(params.named(), loaded.named()):
            assert np.array_equal(a.data, b.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dysh"
        params = init_head(SMALL)
        save_checkpoint(path, params)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "short.dysh"
        params = init_head(SMALL)
        save_checkpoint(path, params)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "long.dysh"
        params = init_head(SMALL)
        save_checkpoint(path, params)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_byte_identical_saves(self, tmp_path):
        params = init_head(SMALL)
        p1, p2 = tmp_path / "a.dysh", tmp_path / "b.dysh"
        save_checkpoint(p1, params)
        save_checkpoint(p2, params)
        assert p1.read_bytes() == p2.read_bytes()


def test_vector_round_trip():
    params = init_head(SMALL)
    vec = params.to_vector()
    rebuilt = HeadParams.from_vector(SMALL, vec)
    for (_, a), (_, b) in zip(params.named(), rebuilt.named()):
        assert np.array_equal(a.data, b.data)
    assert sum(r * c for r, c in param_shapes(SMALL).values()) == vec.size
