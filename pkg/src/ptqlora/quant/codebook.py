"""16-entry 4-bit codebooks on [-1, 1] with an exact zero."""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

CODEBOOK_IDS = ("nf4", "uniform4")
# Tail probability of the outermost NF4 evaluation point.
NF4_OFFSET = (1 / 32 + 1 / 30) / 2


@dataclass(frozen=True, eq=False)
class Codebook:
    id: str
    values: np.ndarray  # float32, shape (16,)

    def __post_init__(self):
        v = self.values
        if v.shape != (16,):
            raise ValueError("a 4-bit codebook has exactly 16 values")
        if not (np.all(np.diff(v) > 0) and v[0] == -1.0 and v[-1] == 1.0 and np.any(v == 0.0)):
            raise ValueError("codebook must be strictly increasing on [-1, 1] and contain 0")

    @property
    def zero_index(self) -> int:
        return int(np.nonzero(self.values == 0.0)[0][0])

    @property
    def max_gap(self) -> float:
        return float(np.max(np.diff(self.values.astype(np.float64))))


def nf4_values() -> np.ndarray:
    """Normal-quantile levels: 8 negative, zero, 7 positive, scaled to [-1, 1].

    Each side evaluates the standard-normal inverse CDF at evenly spaced
    probabilities between the tail offset and one half; the half itself is
    dropped (it maps to the pinned zero).
    """
    ppf = NormalDist().inv_cdf
    neg = [ppf(p) for p in np.linspace(NF4_OFFSET, 0.5, 9)[:-1]]
    pos = [ppf(p) for p in np.linspace(0.5, 1 - NF4_OFFSET, 8)[1:]]
    raw = np.array(neg + [0.0] + pos, dtype=np.float64)
    raw /= np.max(np.abs(raw))
    out = raw.astype(np.float32)
    out[0], out[-1] = -1.0, 1.0
    return out


def uniform4_values() -> np.ndarray:
    v = -1.0 + 2.0 * np.arange(16) / 15.0
    v[np.argmin(np.abs(v))] = 0.0
    return v.astype(np.float32)


def build_codebook(id: str) -> Codebook:
    if id == "nf4":
        return Codebook("nf4", nf4_values())
    if id == "uniform4":
        return Codebook("uniform4", uniform4_values())
    raise ValueError(f"unknown codebook id {id!r}")
