"""
Post-norm transformer encoder-decoder over image feature grids.

Inputs may be unbatched (``[T, d]``) or batched (``[B, T, d]``); every
function keeps the leading axes intact.  Parameters live in a flat
``dict[str, Tensor]`` whose keys and shapes are a pure function of
:class:`ModelConfig` (see :func:`param_shapes`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError, LengthError, MaskError, VocabError
from .tensor import Tensor

NEG_INF = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int = 2048
    d_model: int = 128
    n_heads: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 512
    dropout_p: float = 0.1
    max_len: int = 64
    embed_dropout: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "feature_dim", "d_model", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sin/cos pairs, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _attn_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.{w}": (d, d) for w in ("W_Q", "W_K", "W_V", "W_O")}


def _ffn_shapes(prefix: str, d: int, d_ff: int) -> dict:
    return {f"{prefix}.W1": (d, d_ff), f"{prefix}.b1": (d_ff,),
            f"{prefix}.W2": (d_ff, d), f"{prefix}.b2": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def param_shapes(config: ModelConfig) -> dict:
    d, V = config.d_model, config.vocab_size
    shapes = {"feat_proj.W": (config.feature_dim, d), "feat_proj.b": (d,)}
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, config.d_ff))
        shapes.update(_ln_shapes(f"{p}.ln1", d))
        shapes.update(_ln_shapes(f"{p}.ln2", d))
    shapes["tok_emb"] = (V, d)
    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_attn_shapes(f"{p}.cross_attn", d))
        shapes.update(_ffn_shapes(f"{p}.ffn", d, config.d_ff))
        for j in (1, 2, 3):
            shapes.update(_ln_shapes(f"{p}.ln{j}", d))
    shapes["out_proj.W"] = (d, V)
    shapes["out_proj.b"] = (V,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed form of the number of trainable scalars.

    F*d + d  +  Ne*(4d^2 + 2*d*d_ff + d_ff + d + 4d)
    + V*d  +  Nd*(8d^2 + 2*d*d_ff + d_ff + d + 6d)  +  d*V + V
    """
    d, ff, V, F = config.d_model, config.d_ff, config.vocab_size, config.feature_dim
    ffn = 2 * d * ff + ff + d
    enc = 4 * d * d + ffn + 4 * d
    dec = 8 * d * d + ffn + 6 * d
    return F * d + d + config.n_enc_layers * enc + V * d + config.n_dec_layers * dec + d * V + V


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def positional_encoding(T: int, d: int) -> np.ndarray:
    """``pe[t, 2k] = sin(w_k t)``, ``pe[t, 2k+1] = cos(w_k t)``, ``w_k = 10000^(-2k/d)``."""
    if T < 1:
        raise ConfigError(f"sequence length must be >= 1, got {T}")
    if d < 2 or d % 2:
        raise ConfigError(f"encoding dimension must be even, got {d}")
    t = np.arange(T, dtype=np.float64)[:, None]
    angles = t * frequencies(d)[None, :]
    pe = np.empty((T, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def frequencies(d: int) -> np.ndarray:
    k = np.arange(d // 2, dtype=np.float64)
    return 1.0 / np.power(10000.0, 2.0 * k / d)


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def full_mask(T_q: int, T_k: int) -> np.ndarray:
    return np.ones((T_q, T_k), dtype=bool)


def _mask_bias(mask: np.ndarray, T_q: int, T_k: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T_q, T_k):
        raise MaskError(f"mask shape {mask.shape} does not match scores {(T_q, T_k)}")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise MaskError(f"query rows {empty.tolist()} have every key masked out")
    return np.where(mask, 0.0, NEG_INF)


def attention_weights(Q: Tensor, K: Tensor, mask) -> Tensor:
    T_q, d_k = Q.shape[-2], Q.shape[-1]
    bias = _mask_bias(mask, T_q, K.shape[-2])
    scores = tc.matmul(Q, K.T) * (1.0 / math.sqrt(d_k))
    return tc.softmax(scores + bias, axis=-1)


def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, mask) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + M) V, with M = -1e9 where ``mask`` is False."""
    return tc.matmul(attention_weights(Q, K, mask), V)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = tc.reshape(x, (*lead, T, n_heads, d // n_heads))
    return tc.swapaxes(x, -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    x = tc.swapaxes(x, -3, -2)
    *lead, T, h, dh = x.shape
    return tc.reshape(x, (*lead, T, h * dh))


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: dict, prefix: str,
                         n_heads: int, mask) -> Tensor:
    """Per-head projections are column blocks of W_Q/W_K/W_V; heads are concatenated and
    mixed by W_O."""
    d = x_q.shape[-1]
    if d % n_heads:
        raise ConfigError(f"n_heads={n_heads} does not divide d_model={d}")
    Q = _split_heads(x_q @ params[f"{prefix}.W_Q"], n_heads)
    K = _split_heads(x_kv @ params[f"{prefix}.W_K"], n_heads)
    V = _split_heads(x_kv @ params[f"{prefix}.W_V"], n_heads)
    Z = scaled_dot_product_attention(Q, K, V, mask)
    return _merge_heads(Z) @ params[f"{prefix}.W_O"]


def feed_forward(x: Tensor, params: dict, prefix: str, dropout_p: float = 0.0,
                 mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """FC2(Dropout(ReLU(FC1(x))))."""
    h = tc.relu(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    h = tc.dropout(h, dropout_p, mode, rng)
    return h @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


def sublayer(x_in: Tensor, f: Callable[[Tensor], Tensor], gamma: Tensor, beta: Tensor,
             eps: float = LN_EPS) -> Tensor:
    """Post-norm residual: LayerNorm(x_in + f(x_in))."""
    y = f(x_in)
    if y.shape != x_in.shape:
        raise ContractError(f"sublayer changed shape {x_in.shape} -> {y.shape}")
    return tc.layer_norm(x_in + y, gamma, beta, eps)


def _ln(params, name):
    return params[f"{name}.gamma"], params[f"{name}.beta"]


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def encode(features, params: dict, config: ModelConfig, mode: str = "eval",
           rng: np.random.Generator | None = None) -> Tensor:
    """Project ``features[..., S, feature_dim]`` to d_model, add positions, run the encoder
    stack; returns memory ``[..., S, d_model]``."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    S = feats.shape[-2]
    if S > config.max_len:
        raise LengthError(f"feature grid length {S} exceeds max_len {config.max_len}")
    if feats.shape[-1] != config.feature_dim:
        raise ConfigError(f"feature dim {feats.shape[-1]} != config {config.feature_dim}")
    x = feats @ params["feat_proj.W"] + params["feat_proj.b"]
    x = x + positional_encoding(S, config.d_model)
    if config.embed_dropout:
        x = tc.dropout(x, config.dropout_p, mode, rng)
    mask = full_mask(S, S)
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        x = sublayer(x, lambda z: multi_head_attention(z, z, params, f"{p}.self_attn",
                                                       config.n_heads, mask), *_ln(params, f"{p}.ln1"))
        x = sublayer(x, lambda z: feed_forward(z, params, f"{p}.ffn", config.dropout_p, mode, rng),
                     *_ln(params, f"{p}.ln2"))
    return x


def embed_tokens(token_ids, params: dict, config: ModelConfig) -> Tensor:
    """Token embeddings scaled by sqrt(d_model); positions are added by the decoder stack."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        bad = ids[(ids < 0) | (ids >= config.vocab_size)][0]
        raise VocabError(f"token id {int(bad)} outside vocabulary of size {config.vocab_size}")
    if ids.shape[-1] > config.max_len:
        raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_len {config.max_len}")
    return tc.embedding(params["tok_emb"], ids) * math.sqrt(config.d_model)


def decoder_stack(x: Tensor, memory: Tensor, params: dict, config: ModelConfig,
                  mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Positions + Nd layers (causal self-attn, cross-attn, FFN) + vocabulary projection."""
    T = x.shape[-2]
    x = x + positional_encoding(T, config.d_model)
    if config.embed_dropout:
        x = tc.dropout(x, config.dropout_p, mode, rng)
    self_mask = causal_mask(T)
    cross_mask = full_mask(T, memory.shape[-2])
    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        x = sublayer(x, lambda z: multi_head_attention(z, z, params, f"{p}.self_attn",
                                                       config.n_heads, self_mask), *_ln(params, f"{p}.ln1"))
        x = sublayer(x, lambda z: multi_head_attention(z, memory, params, f"{p}.cross_attn",
                                                       config.n_heads, cross_mask), *_ln(params, f"{p}.ln2"))
        x = sublayer(x, lambda z: feed_forward(z, params, f"{p}.ffn", config.dropout_p, mode, rng),
                     *_ln(params, f"{p}.ln3"))
    return x @ params["out_proj.W"] + params["out_proj.b"]


def decode_forward(token_ids, memory: Tensor, params: dict, config: ModelConfig,
                   mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced logits ``[..., T, vocab_size]`` for the given input ids."""
    return decoder_stack(embed_tokens(token_ids, params, config), memory, params, config, mode, rng)


def forward(features, token_ids, params: dict, config: ModelConfig, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    memory = encode(features, params, config, mode, rng)
    return decode_forward(token_ids, memory, params, config, mode, rng)
