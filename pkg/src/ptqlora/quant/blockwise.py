"""Blockwise absmax 4-bit quantization with optional double-quantized scales."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, NumericError, ShapeError
from .codebook import Codebook, build_codebook


def pack_codes(codes) -> np.ndarray:
    """Two 4-bit codes per byte, low nibble holds the even index."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if codes.size and codes.max() >= 16:
        raise ValueError("codes must be < 16")
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.size != (n + 1) // 2:
        raise DataError(f"packed code buffer holds {packed.size} bytes, expected {(n + 1) // 2}")
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:n]


@dataclass(frozen=True, eq=False)
class DoubleQuantScales:
    chunk_size: int
    offsets: np.ndarray  # float32 per chunk (chunk mean)
    second_scales: np.ndarray  # float32 per chunk (residual absmax)
    codes: np.ndarray  # int8 per original scale

    def dequantize(self) -> np.ndarray:
        chunk = np.arange(self.codes.size) // self.chunk_size
        step = self.second_scales / np.float32(127.0)
        return (self.offsets[chunk] + self.codes.astype(np.float32) * step[chunk]).astype(np.float32)

    def __len__(self):
        return int(self.codes.size)


def double_quantize_scales(scales, chunk_size: int = 256) -> DoubleQuantScales:
    """Per chunk: subtract the mean, then symmetric 8-bit absmax on the residuals."""
    scales = np.asarray(scales, dtype=np.float32).reshape(-1)
    if scales.size == 0:
        raise ValueError("no scales to quantize")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    n_chunks = math.ceil(scales.size / chunk_size)
    offsets = np.empty(n_chunks, dtype=np.float32)
    second = np.empty(n_chunks, dtype=np.float32)
    codes = np.empty(scales.size, dtype=np.int8)
    for c in range(n_chunks):
        s = scales[c * chunk_size : (c + 1) * chunk_size].astype(np.float64)
        offset = np.float32(np.mean(s))
        resid = s - np.float64(offset)
        amax = np.float32(np.max(np.abs(resid)))
        offsets[c], second[c] = offset, amax
        if amax == 0:
            codes[c * chunk_size : c * chunk_size + s.size] = 0
        else:
            q = np.rint(resid / (np.float64(amax) / 127.0))
            codes[c * chunk_size : c * chunk_size + s.size] = np.clip(q, -127, 127).astype(np.int8)
    return DoubleQuantScales(chunk_size, offsets, second, codes)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray  # packed uint8
    shape: tuple
    block_size: int
    scales: object  # np.ndarray float32 or DoubleQuantScales
    codebook_id: str

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_blocks(self) -> int:
        return math.ceil(self.size / self.block_size)

    @property
    def double_quant(self) -> bool:
        return isinstance(self.scales, DoubleQuantScales)

    def unpacked(self) -> np.ndarray:
        return unpack_codes(self.codes, self.size)

    def scale_values(self) -> np.ndarray:
        if isinstance(self.scales, DoubleQuantScales):
            return self.scales.dequantize()
        return np.asarray(self.scales, dtype=np.float32)

    def storage_bits(self) -> int:
        """Bits of codes plus scale metadata, per this module's storage layout."""
        bits = 4 * self.size
        if isinstance(self.scales, DoubleQuantScales):
            return bits + 8 * self.n_blocks + 64 * self.scales.offsets.size
        return bits + 32 * self.n_blocks

    def bits_per_weight(self) -> float:
        return self.storage_bits() / self.size


def bits_per_weight_formula(block_size: int, double_quant: bool, chunk_size: int = 256) -> float:
    """Asymptotic density when every block and chunk is full."""
    if double_quant:
        return 4 + 8 / block_size + 64 / (block_size * chunk_size)
    return 4 + 32 / block_size


def block_scales(w: np.ndarray, block_size: int) -> np.ndarray:
    """Absmax of each run of ``block_size`` consecutive elements of the flattened tensor."""
    flat = np.asarray(w, dtype=np.float32).reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[: flat.size] = np.abs(flat)
    return padded.reshape(n_blocks, block_size).max(axis=1)


def nearest_codes(x: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the codebook value nearest to each ``x``; ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    mids = (v[:-1] + v[1:]) / 2
    idx = np.searchsorted(mids, x, side="left")
    # Rounded midpoints can be off by one; settle against neighbours directly.
    best = idx.copy()
    best_d = np.abs(x - v[idx])
    for shift in (-1, 1):
        cand = np.clip(idx + shift, 0, v.size - 1)
        d = np.abs(x - v[cand])
        better = (d < best_d) | ((d == best_d) & (cand < best))
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best.astype(np.uint8)


def encode_with_scales(w: np.ndarray, scales_per_elem: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Codes for ``w / scale``; zero-scale elements map to the zero code."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(scales_per_elem, dtype=np.float64)
    zero = s == 0
    x = np.where(zero, 0.0, w / np.where(zero, 1.0, s))
    codes = nearest_codes(x, codebook.values)
    codes[zero] = codebook.zero_index
    return codes


def quantize_blockwise(
    w,
    block_size: int = 64,
    codebook: Codebook | str = "nf4",
    double_quant: bool = False,
    chunk_size: int = 256,
) -> QuantizedTensor:
    if isinstance(codebook, str):
        codebook = build_codebook(codebook)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise NumericError("cannot quantize non-finite values")
    flat = w.reshape(-1)
    scales = block_scales(flat, block_size)
    per_elem = np.repeat(scales, block_size)[: flat.size]
    codes = encode_with_scales(flat, per_elem, codebook)
    stored = double_quantize_scales(scales, chunk_size) if double_quant else scales
    return QuantizedTensor(pack_codes(codes), tuple(w.shape), block_size, stored, codebook.id)


def dequantize_blockwise(q: QuantizedTensor) -> np.ndarray:
    codes = q.unpacked()
    if codes.size and codes.max() >= 16:
        raise DataError("corrupted code >= 16")
    values = build_codebook(q.codebook_id).values
    scales = q.scale_values()
    if scales.size != q.n_blocks:
        raise DataError(f"expected {q.n_blocks} scales, found {scales.size}")
    per_elem = np.repeat(scales, q.block_size)[: q.size]
    return (per_elem * values[codes]).astype(np.float32).reshape(q.shape)


def rtn_quantize(w, block_size: int = 64, codebook: Codebook | str = "nf4") -> QuantizedTensor:
    """Round-to-nearest baseline: plain blockwise quantization, no double quant."""
    return quantize_blockwise(w, block_size, codebook, double_quant=False)


def proxy_loss(w, w_hat, x) -> float:
    """Layer output error ``||W X - W_hat X||_F^2`` (X is features x samples)."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != w_hat.shape or w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"shape mismatch: W {w.shape}, W_hat {w_hat.shape}, X {x.shape}")
    d = (w - w_hat) @ x
    return float(np.sum(d * d))
