"""GPTQ: column-greedy 4-bit quantization with inverse-Hessian error feedback."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..errors import ShapeError, SingularHessianError
from .blockwise import (
    QuantizedTensor,
    block_scales,
    double_quantize_scales,
    encode_with_scales,
    pack_codes,
)
from .codebook import Codebook, build_codebook


@dataclass(frozen=True)
class GptqConfig:
    damping_ratio: float = 0.01
    calibration_samples: int = 128
    block_size: int = 64
    act_order: bool = False
    double_quant: bool = False
    chunk_size: int = 256

    def __post_init__(self):
        if self.damping_ratio <= 0:
            raise ValueError("damping_ratio must be positive")
        if self.calibration_samples < 1:
            raise ValueError("calibration_samples must be >= 1")


def damped_hessian(x: np.ndarray, damping_ratio: float) -> np.ndarray:
    """``2 X X^T`` plus ``damping_ratio * mean(diag)`` on the diagonal."""
    h = 2.0 * (x @ x.T)
    h[np.diag_indices_from(h)] += damping_ratio * np.mean(np.diag(h))
    return h


def inverse_hessian_factor(h: np.ndarray) -> np.ndarray:
    """Upper Cholesky factor ``U`` of ``H^-1`` (``H^-1 = U^T U``)."""
    try:
        lower = scipy.linalg.cholesky(h, lower=True)
        hinv = scipy.linalg.cho_solve((lower, True), np.eye(h.shape[0]))
        return scipy.linalg.cholesky(hinv, lower=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularHessianError(f"Hessian is not positive definite after damping: {exc}") from None


def gptq_quantize_matrix(w, x, cfg: GptqConfig = GptqConfig(), codebook: Codebook | str = "uniform4") -> QuantizedTensor:
    """Quantize ``W`` (rows x cols) to minimise ``||W X - W_hat X||^2`` greedily by column.

    Block scales come from the original ``W`` before any error feedback, so a
    diagonal Hessian reproduces plain round-to-nearest exactly. After column
    ``j`` is snapped, its scaled error is pushed onto the remaining columns
    through row ``j`` of the inverse-Hessian Cholesky factor.
    """
    if isinstance(codebook, str):
        codebook = build_codebook(codebook)
    w = np.asarray(w, dtype=np.float32)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"calibration features {x.shape} do not match weight {w.shape}")
    rows, cols = w.shape
    scales = block_scales(w, cfg.block_size)
    per_elem = np.repeat(scales, cfg.block_size)[: w.size].reshape(rows, cols)

    h = damped_hessian(x, cfg.damping_ratio)
    perm = np.argsort(-np.diag(h), kind="stable") if cfg.act_order else np.arange(cols)
    u = inverse_hessian_factor(h[np.ix_(perm, perm)])

    work = w.astype(np.float64)[:, perm]
    s = per_elem[:, perm]
    values = codebook.values.astype(np.float64)
    codes = np.empty((rows, cols), dtype=np.uint8)
    for j in range(cols):
        col = work[:, j]
        c = encode_with_scales(col, s[:, j], codebook)
        codes[:, j] = c
        err = (col - s[:, j] * values[c]) / u[j, j]
        if j + 1 < cols:
            work[:, j + 1 :] -= np.outer(err, u[j, j + 1 :])

    out = np.empty_like(codes)
    out[:, perm] = codes
    stored = double_quantize_scales(scales, cfg.chunk_size) if cfg.double_quant else scales
    return QuantizedTensor(pack_codes(out), (rows, cols), cfg.block_size, stored, codebook.id)
