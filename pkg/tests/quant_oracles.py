"""Independent references for the quantization tests."""

import itertools

import numpy as np
from scipy.special import ndtri

from ptqlora.quant.blockwise import proxy_loss

NF4_OFFSET = (1 / 32 + 1 / 30) / 2


def nf4_oracle() -> np.ndarray:
    """Normal quantiles at evenly spaced tail probabilities, 8 below zero and 7 above."""
    step_neg = (0.5 - NF4_OFFSET) / 8
    step_pos = (0.5 - NF4_OFFSET) / 7
    neg = [ndtri(NF4_OFFSET + k * step_neg) for k in range(8)]
    pos = [ndtri(0.5 + k * step_pos) for k in range(1, 8)]
    v = np.array(neg + [0.0] + pos)
    return v / np.abs(v).max()


def uniform4_oracle() -> np.ndarray:
    v = np.array([-1 + 2 * k / 15 for k in range(16)])
    v[7] = 0.0  # -1/15 is the value nearest zero
    return v


def exhaustive_best(w, x, values, scales):
    """Minimum proxy loss over every code assignment of a single-row ``w``.

    Candidates are reconstructed in float32 and scored with the same
    ``proxy_loss`` used for GPTQ and RTN, so ties compare exactly equal.
    """
    w = np.asarray(w, dtype=np.float32).reshape(1, -1)
    best = np.inf
    grid = np.asarray(values, dtype=np.float32)
    scales = np.asarray(scales, dtype=np.float32)
    for codes in itertools.product(range(len(grid)), repeat=w.size):
        w_hat = (scales * grid[list(codes)]).astype(np.float32).reshape(1, -1)
        best = min(best, proxy_loss(w, w_hat, x))
    return best
