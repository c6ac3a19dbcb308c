"""Word-level tokenizer and vocabulary for Bengali (or any Unicode) captions."""

from __future__ import annotations

import hashlib
import re
import unicodedata
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from .errors import VocabError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
N_RESERVED = len(RESERVED)

DANDA = "।"
DOUBLE_DANDA = "॥"
SPLIT_PUNCT = DANDA + DOUBLE_DANDA + ".,!?;:"

_PUNCT_RE = re.compile(f"([{re.escape(SPLIT_PUNCT)}])")


def normalize_and_tokenize(text: str) -> list[str]:
    """NFC-normalize, split on whitespace, and split off dandas and ``.,!?;:``."""
    tokens = []
    for chunk in unicodedata.normalize("NFC", text).split():
        for piece in _PUNCT_RE.split(chunk):
            if not piece:
                continue
            if piece in RESERVED:
                # a literal "<unk>" in raw text must not become the reserved token
                tokens.extend(["<", piece[1:-1], ">"])
            else:
                tokens.append(piece)
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for tok in tokens:
        if not out:
            out = tok
        elif tok in SPLIT_PUNCT:
            out += tok
        else:
            out += " " + tok
    return out


class Vocab:
    """Bidirectional token/id map; ids 0..3 are pad, bos, eos, unk."""

    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(tokens, start=N_RESERVED)}
        if len(self.stoi) != len(tokens):
            raise VocabError("vocabulary tokens must be unique")
        if set(tokens) & set(RESERVED):
            raise VocabError("reserved token names cannot appear as regular tokens")
        self.min_freq = min_freq

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        return self.itos[N_RESERVED:]

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.itos):
            raise VocabError(f"id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path):
        text = "".join(tok + "\n" for tok in self.tokens)
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Keep tokens seen at least ``min_freq`` times, ordered by (count desc, token asc)."""
    if min_freq < 1:
        raise VocabError(f"min_freq must be positive, got {min_freq}")
    counts = Counter(tok for sent in corpus for tok in sent)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocab(kept, min_freq=min_freq)


def encode(tokens: Sequence[str], vocab: Vocab, max_len: int) -> list[int]:
    """``[bos] + ids + [eos]``, truncated to ``max_len`` with eos kept last."""
    if max_len < 2:
        raise VocabError(f"max_len must leave room for bos and eos, got {max_len}")
    ids = [vocab.id(t) for t in tokens][: max_len - 2]
    return [BOS] + ids + [EOS]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        tok = vocab.token(int(i))
        if int(i) >= N_RESERVED:
            words.append(tok)
    return detokenize(words)
