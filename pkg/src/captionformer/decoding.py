"""Greedy and length-normalized beam-search caption generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .text import BOS, EOS, PAD
from .transformer import ModelConfig, decode_forward

# prefixes [n, t] (each starting with bos) -> next-token log-probs [n, V]
StepFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Beam:
    tokens: tuple
    logp: float = 0.0
    finished: bool = False

    def extend(self, token: int, logp: float) -> "Beam":
        return Beam(self.tokens + (token,), self.logp + logp, token == EOS)

    @property
    def generated(self) -> tuple:
        """Tokens after bos, without a trailing eos."""
        out = self.tokens[1:]
        return out[:-1] if self.finished else out


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def model_step_fn(memory: Tensor, params: dict, config: ModelConfig) -> StepFn:
    """Wrap an eval-mode decoder as a batched next-token scorer over ``memory[S, d]``.

    pad and bos can never be generated: their logits are masked before the
    log-softmax, so the remaining ids carry the whole probability mass.
    """
    mem = memory.data if isinstance(memory, Tensor) else np.asarray(memory)

    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        with tc.no_grad():
            tiled = Tensor(np.broadcast_to(mem, (n, *mem.shape)))
            logits = decode_forward(prefixes, tiled, params, config, "eval")
        last = logits.data[:, -1, :].copy()
        last[:, [PAD, BOS]] = -np.inf
        return _log_softmax(last)

    return step


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> list:
    """Argmax decoding; ties go to the lowest id.  ``max_len`` bounds the decoder input
    (bos included), so at most ``max_len - 1`` tokens are generated."""
    seq = [bos]
    while len(seq) < max_len:
        nxt = int(np.argmax(step(np.array([seq]))[0]))
        if nxt == eos:
            break
        seq.append(nxt)
    return seq[1:]


def length_penalty(n_tokens: int, alpha: float) -> float:
    return ((5.0 + n_tokens) / 6.0) ** alpha


def normalized_score(beam: Beam, alpha: float) -> float:
    return beam.logp / length_penalty(len(beam.tokens) - 1, alpha)


def beam_search_fn(step: StepFn, beam_width: int, max_len: int, length_alpha: float = 0.7,
                   bos: int = BOS, eos: int = EOS) -> Beam:
    """Best beam under ``logp / ((5 + n) / 6) ** alpha``, n counting generated tokens
    (eos included).

    Each round keeps the ``beam_width`` best extensions of the live beams by
    total log-prob (ties: lexicographically smaller sequence); extensions
    ending in eos retire to the finished pool.  Beams still live when the
    decoder input reaches ``max_len`` are retired as they stand.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    alive = [Beam((bos,))]
    finished = []
    while alive and len(alive[0].tokens) < max_len:
        logp = step(np.array([b.tokens for b in alive]))
        cands = []
        for b, row in zip(alive, logp):
            top = np.argsort(-row, kind="stable")[:beam_width]
            cands.extend(b.extend(int(t), float(row[t])) for t in top if np.isfinite(row[t]))
        cands.sort(key=lambda c: (-c.logp, c.tokens))
        alive = []
        for c in cands[:beam_width]:
            (finished if c.finished else alive).append(c)
    finished.extend(alive)
    return min(finished, key=lambda b: (-normalized_score(b, length_alpha), b.tokens))


def greedy_decode(memory: Tensor, params: dict, config: ModelConfig, max_len: int | None = None) -> list:
    return greedy_search(model_step_fn(memory, params, config), max_len or config.max_len)


def beam_search(memory: Tensor, params: dict, config: ModelConfig, beam_width: int = 3,
                max_len: int | None = None, length_alpha: float = 0.7) -> list:
    best = beam_search_fn(model_step_fn(memory, params, config), beam_width,
                          max_len or config.max_len, length_alpha)
    return list(best.generated)


def sequence_logprob(step: StepFn, tokens: Sequence[int], bos: int = BOS) -> float:
    """Sum of stepwise log-probs of ``tokens`` (which exclude bos) recomputed one
    prefix at a time."""
    seq, total = [bos], 0.0
    for t in tokens:
        total += float(step(np.array([seq]))[0, t])
        seq.append(int(t))
    return total
