import math

import numpy as np
import pytest

from dehubert import layers
from dehubert import model as M
from dehubert.audio import Waveform
from dehubert.correlation import grad_check
from dehubert.features import FrameFeatures
from dehubert.units import CodeSequence, LayerRangeError, refresh_units

SMALL = M.ModelConfig(conv_layers=((8, 6, 2), (16, 4, 2)), d_model=16, n_transformer_layers=1,
                      n_heads=2, ff_width=24, K=5, proj_cc_dim=8, proj_sc_dim=12)


def max_err(report):
    return max(p.rel_err for p in report)


# --- layer gradients against central differences --------------------------------


def scalarise(out, R):
    return float(np.sum(out * R))


@pytest.mark.parametrize("which", ["gelu", "linear", "layer_norm"])
def test_elementwise_layer_gradients(which):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 5))
    W, b = rng.normal(size=(5, 4)), rng.normal(size=4)
    g, beta = rng.normal(size=5), rng.normal(size=5)

    def fun(p):
        if which == "gelu":
            y, c = layers.gelu_forward(p["x"])
            R = np.linspace(-1, 1, y.size).reshape(y.shape)
            return scalarise(y, R), {"x": layers.gelu_backward(R, c)}
        if which == "linear":
            y, c = layers.linear_forward(p["x"], p["W"], p["b"])
            R = np.linspace(-1, 1, y.size).reshape(y.shape)
            dx, dW, db = layers.linear_backward(R, c, p["W"])
            return scalarise(y, R), {"x": dx, "W": dW, "b": db}
        y, c = layers.layer_norm_forward(p["x"], p["g"], p["beta"])
        R = np.linspace(-1, 1, y.size).reshape(y.shape) ** 3
        dx, dg, db = layers.layer_norm_backward(R, c, p["g"])
        return scalarise(y, R), {"x": dx, "g": dg, "beta": db}

    params = {"x": x}
    if which == "linear":
        params.update(W=W, b=b)
    if which == "layer_norm":
        params.update(g=g, beta=beta)
    assert max_err(grad_check(fun, params, step=1e-6, n_probes=24, rng=rng)) < 1e-6


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_gradients(stride):
    rng = np.random.default_rng(stride)
    params = {"x": rng.normal(size=(23, 3)), "W": rng.normal(size=(4, 3, 5)), "b": rng.normal(size=4)}

    def fun(p):
        y, c = layers.conv1d_forward(p["x"], p["W"], p["b"], stride)
        R = np.sin(np.arange(y.size)).reshape(y.shape)
        dx, dW, db = layers.conv1d_backward(R, c, p["W"])
        return scalarise(y, R), {"x": dx, "W": dW, "b": db}

    assert max_err(grad_check(fun, params, step=1e-6, n_probes=30, rng=rng)) < 1e-6


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(7)
    x, W, b = rng.normal(size=(17, 2)), rng.normal(size=(3, 2, 4)), rng.normal(size=3)
    y, _ = layers.conv1d_forward(x, W, b, 3)
    assert y.shape == ((17 - 4) // 3 + 1, 3)
    for t in range(y.shape[0]):
        for o in range(3):
            ref = b[o] + sum(W[o, c, j] * x[3 * t + j, c] for c in range(2) for j in range(4))
            assert abs(y[t, o] - ref) < 1e-12


def test_attention_gradients():
    rng = np.random.default_rng(3)
    d = 8
    params = {"x": rng.normal(size=(7, d)), "Wqkv": rng.normal(size=(d, 3 * d)) / 3,
              "bqkv": rng.normal(size=3 * d) / 3, "Wo": rng.normal(size=(d, d)) / 3, "bo": rng.normal(size=d)}

    def fun(p):
        y, c = layers.attention_forward(p["x"], p["Wqkv"], p["bqkv"], p["Wo"], p["bo"], 2)
        R = np.cos(np.arange(y.size)).reshape(y.shape)
        dx, dWqkv, dbqkv, dWo, dbo = layers.attention_backward(R, c, p["Wqkv"], p["Wo"])
        return scalarise(y, R), {"x": dx, "Wqkv": dWqkv, "bqkv": dbqkv, "Wo": dWo, "bo": dbo}

    assert max_err(grad_check(fun, params, step=1e-6, n_probes=40, rng=rng)) < 1e-6


def test_attention_matches_naive_heads():
    rng = np.random.default_rng(4)
    T, d, H = 5, 6, 3
    x, Wqkv, Wo = rng.normal(size=(T, d)), rng.normal(size=(d, 3 * d)), rng.normal(size=(d, d))
    bqkv, bo = np.zeros(3 * d), np.zeros(d)
    y, _ = layers.attention_forward(x, Wqkv, bqkv, Wo, bo, H)
    q, k, v = np.split(x @ Wqkv, 3, axis=1)
    heads = []
    for h in range(H):
        sl = slice(2 * h, 2 * h + 2)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(2)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        heads.append(p @ v[:, sl])
    np.testing.assert_allclose(y, np.concatenate(heads, axis=1) @ Wo, atol=1e-12)


def test_cross_entropy_gradient_and_value():
    rng = np.random.default_rng(5)
    targets = np.array([0, 2, 1, 2])

    def fun(lg):
        return layers.cross_entropy(lg, targets)

    assert max_err(grad_check(fun, rng.normal(size=(4, 3)), n_probes=12, rng=rng)) < 1e-6


def test_softmax_rows_sum_to_one():
    s = np.random.default_rng(0).normal(scale=30, size=(9, 8))
    np.testing.assert_allclose(layers.softmax(s).sum(axis=1), 1.0, atol=1e-15)


# --- model shapes, masking, context network --------------------------------------


def test_receptive_field_and_stride_defaults():
    cfg = M.ModelConfig()
    assert cfg.stride == 4 and cfg.receptive_field == 400


def test_encode_cnn_shape_and_determinism():
    cfg = M.ModelConfig()
    params = M.init_params(cfg, np.random.default_rng(0))
    n = cfg.stride * 10 + cfg.receptive_field - 1
    w = Waveform(np.random.default_rng(1).normal(0, 0.1, n))
    X = M.encode_cnn(params, cfg, w)
    assert X.shape == (10, cfg.d_model)
    assert X.data.tobytes() == M.encode_cnn(params, cfg, w).data.tobytes()
    with pytest.raises(M.ModelError):
        M.encode_cnn(params, cfg, Waveform(np.zeros(cfg.receptive_field - 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(mask_prob=1.5)
    with pytest.raises(ValueError):
        M.ModelConfig(mask_span=0)
    with pytest.raises(ValueError):
        M.ModelConfig(proj_cc_dim=0)
    with pytest.raises(ValueError):
        M.ModelConfig(conv_layers=((32, 4, 2),))


def test_mask_edge_cases():
    rng = np.random.default_rng(0)
    assert M.sample_mask_spans(50, 0.0, 4, rng).count == 0
    assert M.sample_mask_spans(50, 1.0, 1, rng).count == 50


def test_mask_spans_are_clipped_unions():
    rng = np.random.default_rng(1)
    for _ in range(100):
        T = int(rng.integers(1, 30))
        seed = int(rng.integers(1 << 30))
        m = M.sample_mask_spans(T, 0.2, 3, np.random.default_rng(seed)).masked
        starts = np.random.default_rng(seed).random(T) < 0.2
        ref = np.zeros(T, dtype=bool)
        for s in np.flatnonzero(starts):
            ref[s:s + 3] = True
        assert np.array_equal(m, ref)


def test_mask_fraction_monte_carlo():
    rng = np.random.default_rng(2)
    frac = np.mean([M.sample_mask_spans(1000, 0.08, 4, rng).masked[3:].mean() for _ in range(10_000)])
    assert abs(frac - (1 - 0.92 ** 4)) < 0.02


def test_zero_depth_context_is_mask_substitution():
    cfg = M.ModelConfig(conv_layers=((16, 6, 2), (16, 4, 2)), d_model=16, n_transformer_layers=0,
                        n_heads=2)
    params = M.init_params(cfg, np.random.default_rng(0))
    X = FrameFeatures(np.random.default_rng(1).normal(size=(12, 16)), 12)
    mask = M.MaskSet(np.arange(12) % 3 == 0)
    Z, logits = M.encode_context(params, cfg, X, mask)
    expected = X.data.copy()
    expected[mask.masked] = params["mask_emb"]
    np.testing.assert_array_equal(Z.data, expected)
    assert logits.shape == (12, cfg.K)


def test_context_per_utterance_independent_of_batch_order():
    params = M.init_params(SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(n, 16)) for n in (5, 9, 7)]
    ms = [rng.random(x.shape[0]) < 0.3 for x in xs]
    fwd = [M.context_forward(params, SMALL, x, m)[1] for x, m in zip(xs, ms)]
    rev = [M.context_forward(params, SMALL, x, m)[1] for x, m in zip(xs[::-1], ms[::-1])][::-1]
    for a, b in zip(fwd, rev):
        assert a.tobytes() == b.tobytes()


def test_mask_shape_mismatch():
    params = M.init_params(SMALL, np.random.default_rng(0))
    with pytest.raises(M.ModelError):
        M.encode_context(params, SMALL, FrameFeatures(np.zeros((4, 16)), 4), M.MaskSet(np.zeros(3)))


def test_context_gradient_through_stack():
    rng = np.random.default_rng(6)
    params = M.init_params(SMALL, rng)
    masked = np.array([0, 1, 1, 0, 0, 1, 0], dtype=bool)
    codes = rng.integers(0, SMALL.K, size=7)
    names = [k for k in params if k.startswith(("tf.", "head", "mask_emb"))] + ["X"]
    R = rng.normal(size=(7, 16))

    def fun(p):
        Z, logits, cache = M.context_forward(p, SMALL, p["X"], masked)
        loss, dlogits = M.masked_prediction(logits, codes, masked)
        loss += 0.1 * float(np.sum(Z * R))
        grads = M.zeros_like(p)
        grads["X"] = M.context_backward(0.1 * R, dlogits, cache, p, SMALL, grads)
        return loss, grads

    params["X"] = rng.normal(size=(7, 16))
    rep = grad_check(fun, params, step=1e-6, n_probes=48, rng=rng, names=names)
    assert max_err(rep) < 1e-5


def test_cnn_gradient():
    rng = np.random.default_rng(8)
    params = M.init_params(SMALL, rng)
    samples = rng.normal(0, 0.3, size=60)
    names = [k for k in params if k.startswith("cnn")]

    def fun(p):
        X, cache = M.cnn_forward(p, SMALL, samples)
        R = np.sin(np.arange(X.size)).reshape(X.shape)
        grads = M.zeros_like(p)
        M.cnn_backward(R, cache, p, SMALL, grads)
        return float(np.sum(X * R)), grads

    assert max_err(grad_check(fun, params, n_probes=32, rng=rng, names=names)) < 1e-5


# --- losses and projection ---------------------------------------------------------


def test_uniform_logits_loss_is_log_k():
    logits = np.zeros((10, 8))
    codes = CodeSequence(np.arange(10) % 8, 10)
    mask = M.MaskSet(np.arange(10) < 6)
    assert M.hubert_loss(logits, codes, mask) == pytest.approx(math.log(8), abs=1e-12)
    assert abs(math.log(8) - 2.0794) < 1e-4


def test_dominant_logits_loss_vanishes():
    codes = CodeSequence(np.array([1, 0, 2]), 3)
    logits = np.zeros((3, 3))
    logits[np.arange(3), codes.codes] = 60.0
    assert M.hubert_loss(logits, codes, M.MaskSet(np.ones(3))) < 1e-20


def test_three_frame_hand_built_case():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0], [9.0, 0.0, 0.0]])
    codes = CodeSequence(np.array([0, 2, 1, 1]), 4)
    mask = M.MaskSet(np.array([True, True, True, False]))
    ref = 0.0
    for t in range(3):
        z = sum(math.exp(v) for v in logits[t])
        ref += -math.log(math.exp(logits[t, codes.codes[t]]) / z)
    assert M.hubert_loss(logits, codes, mask) == pytest.approx(ref / 3, abs=1e-14)


def test_empty_mask_is_distinct_error():
    with pytest.raises(M.EmptyMaskError):
        M.hubert_loss(np.zeros((4, 3)), CodeSequence(np.zeros(4, dtype=int), 4), M.MaskSet(np.zeros(4)))


def test_mask_beyond_valid_frames_ignored():
    logits = np.zeros((6, 4))
    logits[4:, 0] = 100.0  # padding rows would dominate if counted
    codes = CodeSequence(np.array([1, 1, 1, 1]), 4)
    loss = M.hubert_loss(logits, codes, M.MaskSet(np.ones(6)))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_project_examples():
    params = {"proj_cc.W": np.eye(3), "proj_cc.b": np.zeros(3)}
    data = np.zeros((5, 3))
    data[:4] = np.random.default_rng(0).normal(size=(4, 3))
    F = FrameFeatures(data, 4)
    np.testing.assert_array_equal(M.project(params, "proj_cc", F).data, data)
    params = {"proj_cc.W": np.zeros((3, 2)), "proj_cc.b": np.zeros(2)}
    assert np.all(M.project(params, "proj_cc", F).data == 0.0)
    W, b = np.random.default_rng(1).normal(size=(3, 2)), np.array([0.5, -1.0])
    out = M.project({"proj_sc.W": W, "proj_sc.b": b}, "proj_sc", F).data
    for t in range(4):
        for j in range(2):
            assert abs(out[t, j] - (b[j] + sum(data[t, i] * W[i, j] for i in range(3)))) < 1e-12
    assert np.all(out[4] == 0.0)
    with pytest.raises(ValueError):
        M.project(params, "proj_cc", FrameFeatures(np.zeros((2, 4)), 2))


# --- unit refresh on tapped layers --------------------------------------------------


def tapped_setup():
    params = M.init_params(SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    waves = [Waveform(rng.normal(0, 0.2, int(n))) for n in rng.integers(200, 400, size=12)]
    return params, waves


def test_refresh_units_range_and_determinism():
    params, waves = tapped_setup()
    with pytest.raises(LayerRangeError):
        refresh_units(params, SMALL, 2, waves, 4, np.random.default_rng(0))
    with pytest.raises(LayerRangeError):
        refresh_units(params, SMALL, 0, waves, 4, np.random.default_rng(0))
    a = refresh_units(params, SMALL, 1, waves, 16, np.random.default_rng(5))
    b = refresh_units(params, SMALL, 1, waves, 16, np.random.default_rng(5))
    assert a.K == 16 and a.source == 1 and a.feature_dim == SMALL.d_model
    assert a.centroids.tobytes() == b.centroids.tobytes()
