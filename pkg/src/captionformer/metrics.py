"""
Corpus caption metrics: BLEU-1..4, METEOR (exact match), ROUGE-L and CIDEr.

A corpus is a sequence of ``(candidate, references)`` pairs of token lists.

BLEU returns :data:`BLEU_UNDERFLOW` (the smallest positive normal double,
2.2250738585072014e-308) instead of the geometric mean whenever some
modified precision up to the requested order is zero.  Published tables
that list a BLEU-4 of ``2.22e-308`` come from this convention.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

from .errors import ContractError

BLEU_UNDERFLOW = sys.float_info.min
ROUGE_BETA = 1.2
CIDER_N = 4


@dataclass
class EvalEntry:
    candidate: list
    references: list

    def __post_init__(self):
        if not self.references:
            raise ContractError("every corpus entry needs at least one reference")


def as_corpus(corpus) -> list:
    out = []
    for item in corpus:
        if isinstance(item, EvalEntry):
            out.append(item)
        else:
            cand, refs = item
            out.append(EvalEntry(list(cand), [list(r) for r in refs]))
    if not out:
        raise ContractError("metric needs a non-empty corpus")
    return out


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _closest_ref_len(c: int, refs) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(corpus, N: int = 4) -> float:
    """Corpus BLEU-N with uniform weights and the brevity penalty exp(1 - r/c)."""
    if not 1 <= N <= 4:
        raise ContractError(f"BLEU order must be in 1..4, got {N}")
    corpus = as_corpus(corpus)
    matched = [0] * N
    total = [0] * N
    c_len = r_len = 0
    for e in corpus:
        c_len += len(e.candidate)
        r_len += _closest_ref_len(len(e.candidate), e.references)
        for n in range(1, N + 1):
            cand = ngrams(e.candidate, n)
            max_ref = Counter()
            for r in e.references:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in cand.items())
            total[n - 1] += sum(cand.values())
    if any(m == 0 for m in matched):
        return BLEU_UNDERFLOW
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / N
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------

def meteor_align(cand: Sequence[str], ref: Sequence[str]) -> tuple:
    """``(matches, chunks)`` of the exact-match alignment with the most matches and,
    among those, the fewest chunks."""
    cand, ref = tuple(cand), tuple(ref)
    positions = {}
    for j, w in enumerate(ref):
        positions.setdefault(w, []).append(j)

    # chunks = matches - (number of consecutive pairs i->j, i+1->j+1), so maximize
    # (matches, adjacencies) lexicographically over one-to-one alignments
    @lru_cache(maxsize=None)
    def best(i: int, used: frozenset, prev: int) -> tuple:
        if i == len(cand):
            return (0, 0)
        options = [best(i + 1, used, -2)]
        for j in positions.get(cand[i], ()):
            if j in used:
                continue
            m, a = best(i + 1, used | {j}, j)
            options.append((m + 1, a + (1 if j == prev + 1 else 0)))
        return max(options)

    m, adj = best(0, frozenset(), -2)
    return m, m - adj


def meteor_sentence(cand: Sequence[str], refs) -> float:
    scores = []
    for ref in refs:
        m, chunks = meteor_align(cand, ref)
        if m == 0:
            scores.append(0.0)
            continue
        P, R = m / len(cand), m / len(ref)
        f_mean = 10.0 * P * R / (R + 9.0 * P)
        penalty = 0.5 * (chunks / m) ** 3
        scores.append(f_mean * (1.0 - penalty))
    return max(scores)


def meteor(corpus) -> float:
    corpus = as_corpus(corpus)
    return sum(meteor_sentence(e.candidate, e.references) for e in corpus) / len(corpus)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Sequence[str], refs, beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for ref in refs:
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        R, P = lcs / len(ref), lcs / len(cand)
        best = max(best, (1 + beta ** 2) * R * P / (R + beta ** 2 * P))
    return best


def rouge_l(corpus) -> float:
    corpus = as_corpus(corpus)
    return sum(rouge_l_sentence(e.candidate, e.references) for e in corpus) / len(corpus)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------

def _document_frequency(corpus) -> list:
    df = [Counter() for _ in range(CIDER_N)]
    for e in corpus:
        for n in range(1, CIDER_N + 1):
            seen = set()
            for r in e.references:
                seen.update(ngrams(r, n))
            df[n - 1].update(seen)
    return df


def _tfidf(counts: Counter, df: Counter, log_n: float) -> dict:
    return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_scores(corpus) -> list:
    """Per-image CIDEr; IDF is log(|corpus| / max(1, df)) with df counted over images'
    reference sets."""
    corpus = as_corpus(corpus)
    df = _document_frequency(corpus)
    log_n = math.log(len(corpus))
    scores = []
    for e in corpus:
        per_n = []
        for n in range(1, CIDER_N + 1):
            vc = _tfidf(ngrams(e.candidate, n), df[n - 1], log_n)
            sims = [_cosine(vc, _tfidf(ngrams(r, n), df[n - 1], log_n)) for r in e.references]
            per_n.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_n) / CIDER_N)
    return scores


def cider(corpus) -> float:
    scores = cider_scores(corpus)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_KEYS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider")


@dataclass
class MetricReport:
    bleu: list
    meteor: float
    rouge_l: float
    cider: float
    per_sentence: list = field(default_factory=list)

    def as_dict(self) -> dict:
        d = {f"bleu{n}": self.bleu[n - 1] for n in range(1, 5)}
        d.update(meteor=self.meteor, rouge_l=self.rouge_l, cider=self.cider)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def write(self, out_dir) -> None:
        """``report.json`` (corpus values) and ``per_sentence.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with open(out / "per_sentence.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("index",) + REPORT_KEYS)
            for i, row in enumerate(self.per_sentence):
                writer.writerow([i] + [repr(row[k]) for k in REPORT_KEYS])


def evaluate(corpus) -> MetricReport:
    corpus = as_corpus(corpus)
    per_cider = cider_scores(corpus)
    rows = []
    for e, c in zip(corpus, per_cider):
        row = {f"bleu{n}": bleu([e], n) for n in range(1, 5)}
        row.update(meteor=meteor_sentence(e.candidate, e.references),
                   rouge_l=rouge_l_sentence(e.candidate, e.references), cider=c)
        rows.append(row)
    return MetricReport(
        bleu=[bleu(corpus, n) for n in range(1, 5)],
        meteor=sum(r["meteor"] for r in rows) / len(rows),
        rouge_l=sum(r["rouge_l"] for r in rows) / len(rows),
        cider=sum(per_cider) / len(per_cider),
        per_sentence=rows,
    )
