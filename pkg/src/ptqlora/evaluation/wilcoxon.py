"""Wilcoxon signed-rank test with an exact small-sample null distribution.

Zero differences are dropped (classical Wilcoxon rule, not Pratt); tied
absolute differences share their average rank. The exact two-sided p-value is
the null probability of a rank sum at least as far from its mean as the
observed one, counted with a dynamic program over (doubled) ranks, so it is
exact even with ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ..errors import DataError

EXACT_MAX_N = 25
# Differences are rounded before ranking so float noise cannot split ties.
DIFF_DECIMALS = 12


@dataclass(frozen=True)
class WilcoxonResult:
    w_plus: float
    w_minus: float
    p_value: float
    n_effective: int
    mode: str
    degenerate: bool = False
    median_difference: float = 0.0

    @property
    def statistic(self) -> float:
        return self.w_plus

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value <= alpha


@dataclass
class PairedScores:
    """Paired observations ``(score_a, score_b)`` with an optional condition id each."""

    pairs: list = field(default_factory=list)
    conditions: list = field(default_factory=list)
    result: WilcoxonResult | None = None

    def add(self, a: float, b: float, condition=None):
        self.pairs.append((float(a), float(b)))
        self.conditions.append(condition)

    def differences(self) -> np.ndarray:
        return np.array([a - b for a, b in self.pairs], dtype=np.float64)


def signed_ranks(diffs) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero differences and their average ranks by absolute value."""
    d = np.round(np.asarray(diffs, dtype=np.float64), DIFF_DECIMALS)
    d = d[d != 0]
    return d, rankdata(np.abs(d), method="average")


def exact_null_counts(doubled_ranks) -> list[int]:
    """``counts[s]`` = number of sign patterns whose doubled positive-rank sum is ``s``."""
    counts = [1]
    for r in doubled_ranks:
        r = int(r)
        nxt = counts + [0] * r
        for s, c in enumerate(counts):
            if c:
                nxt[s + r] += c
        counts = nxt
    return counts


def exact_p_value(ranks, w_plus: float) -> float:
    doubled = [int(round(2 * r)) for r in ranks]
    total = sum(doubled)
    obs = int(round(2 * w_plus))
    dev = abs(2 * obs - total)
    counts = exact_null_counts(doubled)
    extreme = sum(c for s, c in enumerate(counts) if abs(2 * s - total) >= dev)
    return min(1.0, extreme / 2 ** len(doubled))


def normal_p_value(ranks, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts**3 - tie_counts)) / 48
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2)))


def wilcoxon_signed_rank(pairs, mode: str = "auto") -> WilcoxonResult:
    """Two-sided test of ``score_a - score_b`` centred at zero.

    ``pairs`` is a :class:`PairedScores` or an iterable of ``(a, b)``. A
    ``PairedScores`` input also gets its ``result`` field filled in.
    """
    if mode not in ("exact", "normal_approx", "auto"):
        raise ValueError(f"unknown mode {mode!r}")
    holder = pairs if isinstance(pairs, PairedScores) else None
    pair_list = holder.pairs if holder is not None else [(float(a), float(b)) for a, b in pairs]
    if not pair_list:
        raise DataError("at least one pair is required")
    d, ranks = signed_ranks([a - b for a, b in pair_list])
    n = int(d.size)
    if n == 0:
        res = WilcoxonResult(0.0, 0.0, 1.0, 0, mode, degenerate=True)
    else:
        w_plus = float(np.sum(ranks[d > 0]))
        w_minus = float(np.sum(ranks[d < 0]))
        use_exact = mode == "exact" or (mode == "auto" and n <= EXACT_MAX_N)
        p = exact_p_value(ranks, w_plus) if use_exact else normal_p_value(ranks, w_plus)
        res = WilcoxonResult(
            w_plus,
            w_minus,
            p,
            n,
            "exact" if use_exact else "normal_approx",
            median_difference=float(np.median([a - b for a, b in pair_list])),
        )
    if holder is not None:
        holder.result = res
    return res
