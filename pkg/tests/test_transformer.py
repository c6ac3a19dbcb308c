import math

import numpy as np
import pytest

from captionformer import tensor as tc, transformer as tf
from captionformer.errors import ConfigError, ContractError, LengthError, MaskError, VocabError
from captionformer.tensor import Tensor


# --- positional encoding -------------------------------------------------------

def test_positional_encoding_first_row_and_entry():
    pe = tf.positional_encoding(5, 20)
    np.testing.assert_array_equal(pe[0], np.tile([0.0, 1.0], 10))
    assert abs(pe[1, 0] - 0.841470985) < 1e-9
    assert abs(pe[1, 1] - 0.540302306) < 1e-9
    assert abs(pe[1, 0] - math.sin(1.0)) < 1e-12


def test_positional_encoding_last_pair_frequency():
    w = tf.frequencies(20)
    assert w[9] == pytest.approx(10 ** -3.6, rel=1e-12)
    assert w[9] == pytest.approx(2.5119e-4, rel=1e-4)
    assert 2 * math.pi / w[9] == pytest.approx(2.5013e4, rel=1e-4)
    assert np.all(np.diff(w) < 0)


def test_positional_encoding_rejects_odd_dim():
    with pytest.raises(ConfigError):
        tf.positional_encoding(3, 7)
    with pytest.raises(ConfigError):
        tf.ModelConfig(vocab_size=5, d_model=7, n_heads=1)


# --- attention ----------------------------------------------------------------

def test_attention_identical_keys_average_values(rng):
    K = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    V = Tensor(rng.normal(size=(5, 3)))
    Q = Tensor(rng.normal(size=(2, 4)))
    Z = tf.scaled_dot_product_attention(Q, K, V, tf.full_mask(2, 5))
    np.testing.assert_allclose(Z.data, np.tile(V.data.mean(axis=0), (2, 1)), atol=1e-14)


def test_attention_hand_example():
    Z = tf.scaled_dot_product_attention(Tensor([[1.0]]), Tensor([[1.0], [0.0]]),
                                        Tensor([[1.0], [0.0]]), tf.full_mask(1, 2))
    assert Z.data[0, 0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert Z.data[0, 0] == pytest.approx(0.73106, abs=1e-5)


def test_attention_one_hot_mask_selects_value(rng):
    Q, K, V = (Tensor(rng.normal(size=s)) for s in ((3, 4), (5, 4), (5, 2)))
    mask = np.zeros((3, 5), dtype=bool)
    mask[:, 2] = True
    Z = tf.scaled_dot_product_attention(Q, K, V, mask)
    np.testing.assert_array_equal(Z.data, np.tile(V.data[2], (3, 1)))


def test_attention_fully_masked_row_is_an_error(rng):
    Q, K, V = (Tensor(rng.normal(size=s)) for s in ((2, 4), (3, 4), (3, 2)))
    mask = np.ones((2, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(MaskError):
        tf.scaled_dot_product_attention(Q, K, V, mask)


def test_attention_weights_normalized_and_masked(rng):
    Q, K = Tensor(rng.normal(size=(6, 4)) * 3), Tensor(rng.normal(size=(6, 4)) * 3)
    W = tf.attention_weights(Q, K, tf.causal_mask(6)).data
    np.testing.assert_allclose(W.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(W[~tf.causal_mask(6)] < 1e-30)


def test_causal_mask_is_lower_triangular():
    m = tf.causal_mask(4)
    assert np.array_equal(m, np.tril(np.ones((4, 4), dtype=bool)))
    assert m.any(axis=1).all()


def _attn_params(rng, d, prefix="a"):
    return {f"{prefix}.{w}": Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for w in ("W_Q", "W_K", "W_V", "W_O")}


def test_single_head_equals_projection_attention_projection(rng):
    d = 6
    p = _attn_params(rng, d)
    xq, xkv = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(5, d)))
    mask = tf.full_mask(3, 5)
    got = tf.multi_head_attention(xq, xkv, p, "a", 1, mask).data
    q, k, v = xq.data @ p["a.W_Q"].data, xkv.data @ p["a.W_K"].data, xkv.data @ p["a.W_V"].data
    s = q @ k.T / math.sqrt(d)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, (w @ v) @ p["a.W_O"].data, atol=1e-13)


def test_multi_head_matches_per_head_loop(rng):
    d, h = 16, 8
    p = _attn_params(rng, d)
    xq, xkv = Tensor(rng.normal(size=(4, d))), Tensor(rng.normal(size=(3, d)))
    got = tf.multi_head_attention(xq, xkv, p, "a", h, tf.full_mask(4, 3)).data
    dh = d // h
    assert dh == 2
    heads = []
    for i in range(h):
        cols = slice(i * dh, (i + 1) * dh)
        q = xq.data @ p["a.W_Q"].data[:, cols]
        k = xkv.data @ p["a.W_K"].data[:, cols]
        v = xkv.data @ p["a.W_V"].data[:, cols]
        s = q @ k.T / math.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((w / w.sum(axis=1, keepdims=True)) @ v)
    np.testing.assert_allclose(got, np.concatenate(heads, axis=1) @ p["a.W_O"].data, atol=1e-13)


@pytest.mark.parametrize("T_k", [1, 2, 7])
def test_multi_head_output_shape(rng, T_k):
    p = _attn_params(rng, 16)
    out = tf.multi_head_attention(Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(T_k, 16))),
                                  p, "a", 8, tf.full_mask(3, T_k))
    assert out.shape == (3, 16)


# --- feed-forward and sublayer ------------------------------------------------

def test_ffn_dead_relu_gives_output_bias():
    p = {"f.W1": Tensor(np.ones((2, 3))), "f.b1": Tensor(np.full(3, -100.0)),
         "f.W2": Tensor(np.ones((3, 2))), "f.b2": Tensor([0.5, -0.25])}
    out = tf.feed_forward(Tensor([[1.0, 2.0], [0.5, -1.0]]), p, "f")
    np.testing.assert_array_equal(out.data, [[0.5, -0.25], [0.5, -0.25]])


def test_ffn_scalar_composition():
    p = {"f.W1": Tensor([[2.0]]), "f.b1": Tensor([0.0]), "f.W2": Tensor([[3.0]]), "f.b2": Tensor([1.0])}
    assert tf.feed_forward(Tensor([[1.0]]), p, "f").data[0, 0] == 7.0


def test_ffn_modes(rng):
    p = {"f.W1": Tensor(rng.normal(size=(4, 8))), "f.b1": Tensor(np.ones(8)),
         "f.W2": Tensor(rng.normal(size=(8, 4))), "f.b2": Tensor(np.zeros(4))}
    x = Tensor(rng.normal(size=(5, 4)))
    ev = tf.feed_forward(x, p, "f", 0.3, "eval").data
    np.testing.assert_array_equal(tf.feed_forward(x, p, "f", 0.0, "train", rng).data, ev)
    assert not np.array_equal(tf.feed_forward(x, p, "f", 0.3, "train", rng).data, ev)


def test_sublayer_residual_only_and_doubling(rng):
    x = Tensor(rng.normal(size=(3, 5)))
    g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
    zero = tf.sublayer(x, lambda z: z * 0.0, g, b).data
    np.testing.assert_array_equal(zero, tc.layer_norm(x, g, b).data)
    doubled = tf.sublayer(x, lambda z: z, g, b).data
    np.testing.assert_array_equal(doubled, tc.layer_norm(x * 2.0, g, b).data)
    with pytest.raises(ContractError):
        tf.sublayer(x, lambda z: tc.reshape(z, (5, 3)), g, b)


def test_sublayer_preserves_row_argmax():
    rng = np.random.default_rng(8)
    for _ in range(50):
        x = Tensor(rng.normal(size=(4, 7)))
        out = tf.sublayer(x, lambda z: z * 0.0, Tensor(np.full(7, 2.5)), Tensor(np.full(7, 0.3)))
        np.testing.assert_array_equal(out.data.argmax(axis=1), x.data.argmax(axis=1))


# --- encoder / decoder --------------------------------------------------------

@pytest.fixture
def model(tiny_config):
    cfg = tf.ModelConfig(**{**tiny_config.to_dict(), "max_len": 64})
    return cfg, tf.init_params(cfg, np.random.default_rng(0))


@pytest.mark.parametrize("S", [1, 49])
def test_encode_shape(model, rng, S):
    cfg, params = model
    assert tf.encode(rng.normal(size=(S, cfg.feature_dim)), params, cfg).shape == (S, cfg.d_model)


def test_encode_empty_stack_is_projection_plus_positions(tiny_config, rng):
    cfg = tf.ModelConfig(**{**tiny_config.to_dict(), "n_enc_layers": 0})
    params = tf.init_params(cfg, rng)
    feats = rng.normal(size=(4, cfg.feature_dim))
    expected = feats @ params["feat_proj.W"].data + params["feat_proj.b"].data + tf.positional_encoding(4, cfg.d_model)
    np.testing.assert_allclose(tf.encode(feats, params, cfg).data, expected, atol=1e-14)


def test_encode_is_order_sensitive(model, rng):
    cfg, params = model
    feats = rng.normal(size=(5, cfg.feature_dim))
    perm = np.array([3, 0, 4, 1, 2])
    a = tf.encode(feats, params, cfg).data[perm]
    b = tf.encode(feats[perm], params, cfg).data
    assert np.linalg.norm(a - b) > 1e-6


def test_encode_length_limit(tiny_config, rng):
    params = tf.init_params(tiny_config, rng)
    with pytest.raises(LengthError):
        tf.encode(rng.normal(size=(tiny_config.max_len + 1, tiny_config.feature_dim)), params, tiny_config)


def test_decode_forward_shape_and_vocab_check(model, rng):
    cfg, params = model
    memory = tf.encode(rng.normal(size=(3, cfg.feature_dim)), params, cfg)
    assert tf.decode_forward([1, 4, 5, 6], memory, params, cfg).shape == (4, cfg.vocab_size)
    with pytest.raises(VocabError):
        tf.decode_forward([1, cfg.vocab_size], memory, params, cfg)


def test_batched_matches_unbatched(model, rng):
    cfg, params = model
    feats = rng.normal(size=(2, 3, cfg.feature_dim))
    ids = np.array([[1, 4, 5], [1, 6, 7]])
    batched = tf.forward(feats, ids, params, cfg).data
    for b in range(2):
        np.testing.assert_allclose(tf.forward(feats[b], ids[b], params, cfg).data, batched[b], atol=1e-13)


def causal_leak(cfg, params, rng, T=6):
    """Largest |d logits[t] / d x[t']| over t' > t, by autodiff."""
    memory = tf.encode(rng.normal(size=(4, cfg.feature_dim)), params, cfg)
    ids = rng.integers(0, cfg.vocab_size, size=T)
    x = Tensor(tf.embed_tokens(ids, params, cfg).data, requires_grad=True)
    worst = 0.0
    for t in range(T):
        x.grad = None
        logits = tf.decoder_stack(x, memory, params, cfg)
        sel = np.zeros(logits.shape)
        sel[t] = rng.normal(size=cfg.vocab_size)
        tc.backward(tc.tensor_sum(logits * sel))
        if t + 1 < T:
            worst = max(worst, float(np.abs(x.grad[t + 1:]).max()))
        assert np.abs(x.grad[: t + 1]).max() > 0
    return worst


@pytest.mark.parametrize("n_dec", [1, 2, 3])
def test_decoder_is_causal(tiny_config, rng, n_dec):
    cfg = tf.ModelConfig(**{**tiny_config.to_dict(), "n_dec_layers": n_dec})
    params = tf.init_params(cfg, rng)
    assert causal_leak(cfg, params, rng) < 1e-12


def test_memory_reaches_every_position(model, rng):
    cfg, params = model
    ids = [1, 4, 5, 6]
    m1 = tf.encode(rng.normal(size=(3, cfg.feature_dim)), params, cfg)
    m2 = Tensor(m1.data + rng.normal(size=m1.shape) * 0.1)
    d = np.abs(tf.decode_forward(ids, m1, params, cfg).data - tf.decode_forward(ids, m2, params, cfg).data)
    assert np.all(d.max(axis=1) > 0)


def test_eval_forward_is_bit_identical(model, rng):
    cfg, params = model
    feats, ids = rng.normal(size=(3, cfg.feature_dim)), [1, 5, 4]
    a = tf.forward(feats, ids, params, cfg, "eval").data
    b = tf.forward(feats, ids, params, cfg, "eval").data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kw", [{}, {"n_enc_layers": 0, "n_dec_layers": 3},
                                {"d_model": 16, "n_heads": 8, "d_ff": 64, "vocab_size": 37}])
def test_param_count_closed_form(tiny_config, kw):
    cfg = tf.ModelConfig(**{**tiny_config.to_dict(), **kw})
    params = tf.init_params(cfg, np.random.default_rng(0))
    assert sum(p.size for p in params.values()) == tf.param_count(cfg)
    assert {k: p.shape for k, p in params.items()} == tf.param_shapes(cfg)


def test_init_follows_glorot(tiny_config):
    params = tf.init_params(tiny_config, np.random.default_rng(0))
    W = params["enc.0.ffn.W1"].data
    assert np.abs(W).max() <= math.sqrt(6 / sum(W.shape))
    assert np.all(params["enc.0.ffn.b1"].data == 0)
    assert np.all(params["dec.0.ln3.gamma"].data == 1) and np.all(params["dec.0.ln3.beta"].data == 0)


def test_small_model_gradients(tiny_config, rng):
    cfg = tf.ModelConfig(**{**tiny_config.to_dict(), "d_model": 4, "n_heads": 2, "d_ff": 6,
                            "vocab_size": 7, "feature_dim": 3})
    params = tf.init_params(cfg, rng)
    feats, ids, tgt = rng.normal(size=(3, 3)), [1, 4, 5], [4, 5, 2]

    def loss():
        lp = tc.log_softmax(tf.forward(feats, ids, params, cfg, "eval"))
        return tc.tensor_sum(tc.pick(lp, tgt)) * (-1 / 3)

    assert tc.grad_check(loss, list(params.values())) < 1e-6
