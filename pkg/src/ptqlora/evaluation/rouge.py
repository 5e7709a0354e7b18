"""ROUGE-1/2/L/Lsum F-measures.

Tokens are lowercase alphanumeric runs; no stemming. Lsum splits both texts
into sentences at newlines and terminal punctuation and scores, for every
reference sentence, the union of its LCS hits against every predicted
sentence; hits are clipped by token counts so a token cannot be matched more
often than it occurs on either side.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import NamedTuple

_TOKEN = re.compile(r"[a-z0-9]+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+|\n+")


class RougeScores(NamedTuple):
    r1: float
    r2: float
    rl: float
    rlsum: float
    both_empty: bool = False


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def split_sentences(text: str) -> list[list[str]]:
    sents = [tokenize(s) for s in _SENTENCE_END.split(text)]
    return [s for s in sents if s]


def _f1(hits: float, n_pred: int, n_ref: int) -> float:
    if hits == 0 or n_pred == 0 or n_ref == 0:
        return 0.0
    p, r = hits / n_pred, hits / n_ref
    return 2 * p * r / (p + r)


def ngram_f1(pred: list[str], ref: list[str], n: int) -> float:
    pc = Counter(tuple(pred[i : i + n]) for i in range(len(pred) - n + 1))
    rc = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    hits = sum((pc & rc).values())
    return _f1(hits, sum(pc.values()), sum(rc.values()))


def lcs_table(a: list[str], b: list[str]) -> list[list[int]]:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a, 1):
        row, prev = t[i], t[i - 1]
        for j, y in enumerate(b, 1):
            row[j] = prev[j - 1] + 1 if x == y else max(prev[j], row[j - 1])
    return t


def lcs_length(a: list[str], b: list[str]) -> int:
    return lcs_table(a, b)[-1][-1]


def _lcs_positions(ref: list[str], cand: list[str]) -> set[int]:
    """Indices into ``ref`` of one longest common subsequence with ``cand``."""
    t = lcs_table(ref, cand)
    i, j, hits = len(ref), len(cand), set()
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            hits.add(i - 1)
            i, j = i - 1, j - 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return hits


def summary_lcs_f1(pred_sents: list[list[str]], ref_sents: list[list[str]]) -> float:
    n_pred = sum(map(len, pred_sents))
    n_ref = sum(map(len, ref_sents))
    if n_pred == 0 or n_ref == 0:
        return 0.0
    pred_left = Counter(t for s in pred_sents for t in s)
    ref_left = Counter(t for s in ref_sents for t in s)
    hits = 0
    for ref in ref_sents:
        union: set[int] = set()
        for cand in pred_sents:
            union |= _lcs_positions(ref, cand)
        for idx in sorted(union):
            tok = ref[idx]
            if pred_left[tok] > 0 and ref_left[tok] > 0:
                hits += 1
                pred_left[tok] -= 1
                ref_left[tok] -= 1
    return _f1(hits, n_pred, n_ref)


def rouge_scores(prediction: str, reference: str) -> RougeScores:
    pred, ref = tokenize(prediction), tokenize(reference)
    if not pred and not ref:
        return RougeScores(1.0, 1.0, 1.0, 1.0, both_empty=True)
    if not pred or not ref:
        return RougeScores(0.0, 0.0, 0.0, 0.0)
    return RougeScores(
        ngram_f1(pred, ref, 1),
        ngram_f1(pred, ref, 2),
        _f1(lcs_length(pred, ref), len(pred), len(ref)),
        summary_lcs_f1(split_sentences(prediction), split_sentences(reference)),
    )
