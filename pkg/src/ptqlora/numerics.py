"""Dense numerics shared by every other module.

Tensors are plain row-major ``numpy.ndarray`` values. float32 is the working
precision; float64 inputs stay float64 so gradient checks can run at high
precision through the same code paths.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError, UndefinedLossError

DEFAULT_DTYPE = np.float32
IGNORE_INDEX = -100

_TWO_POW_53 = float(2**53)


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype or DEFAULT_DTYPE)
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm_rows(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis (population variance), then apply ``gamma * xhat + beta``.

    Returns ``(y, cache)``; the cache feeds :func:`layer_norm_backward`.
    """
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dy, cache):
    xhat, rstd, gamma = cache
    n = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - np.sum(dxhat, axis=-1, keepdims=True) / n
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / n
    )
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU; returns ``(y, cache)``."""
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def cross_entropy(logits: np.ndarray, targets, ignore_index: int = IGNORE_INDEX):
    """Mean token NLL over non-ignored rows of ``logits`` (shape ``b x V``).

    Returns ``(loss, dlogits)`` where ``dlogits = (softmax - onehot) / count`` on
    counted rows and zero elsewhere.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"logits {logits.shape} incompatible with targets {targets.shape}")
    keep = targets != ignore_index
    count = int(np.count_nonzero(keep))
    if count == 0:
        raise UndefinedLossError("every target position is ignored")
    vocab = logits.shape[1]
    if np.any((targets[keep] < 0) | (targets[keep] >= vocab)):
        raise ShapeError("target index outside [0, vocab)")

    shifted = logits - np.max(logits, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.nonzero(keep)[0]
    nll = logsumexp[rows] - shifted[rows, targets[rows]]
    loss = float(np.sum(nll, dtype=np.float64) / count)

    probs = np.exp(shifted - logsumexp[:, None])
    dlogits = np.zeros_like(logits)
    dlogits[rows] = probs[rows]
    dlogits[rows, targets[rows]] -= 1.0
    dlogits /= count
    return loss, dlogits


class Rng:
    """Seeded random stream identified by ``(seed, stream)``.

    Raw 64-bit words come from PCG64 keyed by a ``SeedSequence``; both are
    specified bit-for-bit by numpy, so sequences are identical across platforms.
    Uniforms take the top 53 bits of each word. Gaussians use the basic
    (trigonometric) Box-Muller transform, consuming two words per pair.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self._bitgen = np.random.PCG64(ss)

    def child(self, stream: int) -> "Rng":
        """Independent stream derived from this seed (does not consume state)."""
        return Rng(self.seed, stream)

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in ``[0, 1)``."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) / _TWO_POW_53

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0, dtype=None) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        pairs = (n + 1) // 2
        words = self.raw(2 * pairs) >> np.uint64(11)
        u1 = (words[0::2].astype(np.float64) + 1.0) / _TWO_POW_53  # (0, 1]
        u2 = words[1::2].astype(np.float64) / _TWO_POW_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        out = mean + std * z[:n]
        return out.astype(dtype or DEFAULT_DTYPE)

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (float-scaled; bias below 2**-40 for small ``high``)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, seq):
        return seq[int(self.integers(1, len(seq))[0])]


def rng_normal(rng: Rng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    return rng.normal(n, mean, std)
