"""
Positional encodings and masked attention
=========================================

Look at the sinusoidal position table, then check that a causal mask stops
attention from looking ahead.
"""

import numpy as np

from captionformer import transformer as tf
from captionformer.tensor import Tensor

# position 0 is [sin 0, cos 0, ...] = [0, 1, 0, 1, ...]
pe = tf.positional_encoding(6, 8)
print(np.round(pe, 3))

# wavelengths grow geometrically along the vector
print("frequencies", tf.frequencies(8))

# attention over 4 positions with a causal mask: row t only weights columns <= t
rng = np.random.default_rng(1)
Q, K = (Tensor(rng.normal(size=(4, 8))) for _ in range(2))
w = tf.attention_weights(Q, K, tf.causal_mask(4))
print(np.round(w.data, 3))

# a full encoder-decoder forward pass on random features
cfg = tf.ModelConfig(vocab_size=20, feature_dim=16, d_model=32, n_heads=4, d_ff=64, max_len=12)
params = tf.init_params(cfg, rng)
print("parameters", tf.param_count(cfg))
logits = tf.forward(rng.normal(size=(5, 16)), [1, 7, 9, 4], params, cfg)
print("logits", logits.shape)
