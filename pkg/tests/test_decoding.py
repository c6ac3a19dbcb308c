import itertools
import math

import numpy as np
import pytest

from captionformer import decoding as dec, tensor as tc, text
from captionformer.transformer import ModelConfig, encode, init_params


def random_model(seed, vocab_size=12, d_model=16, max_len=8):
    cfg = ModelConfig(vocab_size=vocab_size, feature_dim=4, d_model=d_model, n_heads=2, n_enc_layers=1,
                      n_dec_layers=1, d_ff=16, dropout_p=0.0, max_len=max_len)
    params = init_params(cfg, tc.rng_for(seed, 99))
    feats = tc.rng_for(seed, 100).normal(size=(3, 4))
    with tc.no_grad():
        memory = encode(feats, params, cfg, "eval")
    return memory, params, cfg


def table_step(table, V):
    """Step function over an explicit prefix -> probability table."""
    def step(prefixes):
        return np.array([np.log(table.get(tuple(p), np.full(V, 1.0 / V))) for p in prefixes])
    return step


def test_greedy_max_len_one_is_empty():
    memory, params, cfg = random_model(0)
    assert dec.greedy_decode(memory, params, cfg, max_len=1) == []
    assert dec.beam_search(memory, params, cfg, 3, max_len=1) == []


def test_greedy_is_deterministic():
    memory, params, cfg = random_model(1)
    assert dec.greedy_decode(memory, params, cfg) == dec.greedy_decode(memory, params, cfg)


def test_greedy_ties_go_to_lowest_id():
    step = table_step({}, 4)
    assert dec.greedy_search(step, 3, bos=3, eos=2) == [0, 0]


def test_beam_width_one_equals_greedy():
    for seed in range(100):
        memory, params, cfg = random_model(seed)
        assert dec.beam_search(memory, params, cfg, 1) == dec.greedy_decode(memory, params, cfg), seed


def _toy_table():
    # tokens a=0, b=1, eos=2; bos=3 only ever appears as the prefix start.
    # greedy takes a (0.5) and then gets stuck; the mode starts with b.
    return {
        (3,): np.array([0.5, 0.4, 0.1]),
        (3, 0): np.array([0.34, 0.33, 0.33]),
        (3, 1): np.array([0.05, 0.9, 0.05]),
    }


def _exhaustive_mode(table, max_len, bos=3, eos=2):
    step = table_step(table, 3)
    hyps = []
    for n in range(1, max_len):
        for body in itertools.product((0, 1, 2), repeat=n):
            if eos in body[:-1]:
                continue
            if body[-1] != eos and n < max_len - 1:
                continue
            hyps.append(body)
    scored = [(dec.sequence_logprob(step, h, bos=bos), h) for h in hyps]
    return max(scored, key=lambda s: (s[0], [-t for t in s[1]]))


def test_beam_finds_exhaustive_mode_on_toy_distribution():
    table = _toy_table()
    step = table_step(table, 3)
    logp, mode = _exhaustive_mode(table, 3)
    best = dec.beam_search_fn(step, 3, 3, length_alpha=0.0, bos=3, eos=2)
    assert best.tokens[1:] == mode
    assert best.logp == pytest.approx(logp, abs=1e-12)
    assert mode == (1, 1) and math.exp(logp) == pytest.approx(0.36)
    assert dec.greedy_search(step, 3, bos=3, eos=2) == [0, 0]


def test_larger_beam_never_lowers_unnormalized_score():
    failures = []
    for seed in range(100):
        memory, params, cfg = random_model(seed)
        step = dec.model_step_fn(memory, params, cfg)
        scores = [dec.beam_search_fn(step, B, cfg.max_len, 0.0).logp for B in (1, 2, 4, 8)]
        if any(b < a for a, b in zip(scores, scores[1:])):
            failures.append((seed, scores))
    assert not failures, failures


def test_outputs_never_contain_reserved_ids():
    for seed in range(30):
        memory, params, cfg = random_model(seed, vocab_size=6)
        for ids in (dec.greedy_decode(memory, params, cfg), dec.beam_search(memory, params, cfg, 4)):
            assert not set(ids) & {text.PAD, text.BOS, text.EOS}


def test_beam_scores_match_recomputed_logprob():
    for seed in range(20):
        memory, params, cfg = random_model(seed)
        step = dec.model_step_fn(memory, params, cfg)
        best = dec.beam_search_fn(step, 4, cfg.max_len)
        assert abs(best.logp - dec.sequence_logprob(step, best.tokens[1:])) < 1e-10


def test_length_penalty_prefers_longer_with_alpha():
    assert dec.length_penalty(1, 0.0) == 1.0
    b_short = dec.Beam((1, 2), -1.0, True)
    b_long = dec.Beam((1, 5, 6, 7, 2), -1.5, True)
    assert dec.normalized_score(b_short, 0.0) > dec.normalized_score(b_long, 0.0)
    assert dec.normalized_score(b_short, 2.0) < dec.normalized_score(b_long, 2.0)


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        dec.beam_search_fn(table_step({}, 3), 0, 3)
