"""Binary checkpoint format (little-endian throughout).

::

    magic      4s   b"PQLR"
    version    u32  1
    total_len  u64  byte length of the whole file, trailer included
    meta_len   u32  + meta_len bytes of UTF-8 JSON (sorted keys)
    n_entries  u32
    directory  n_entries x entry
    payload    concatenated tensor bytes
    crc32      u32  CRC-32 of every preceding byte

    entry:
      name_len u16, name bytes (UTF-8)
      dtype    u8   0 = float32, 1 = float64, 2 = packed 4-bit
      rank     u8,  dims u32 x rank
      offset   u64, length u64   (relative to the payload start)
      4-bit entries only:
        codebook u8 (0 nf4, 1 uniform4), block_size u32, double_quant u8,
        chunk_size u32, n_scales u32

A 4-bit payload is the packed codes (two per byte, low nibble first), then
either float32 scales, or for double-quantized scales: float32 chunk offsets,
float32 chunk second-level scales, int8 scale codes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import STAGE_LABELS, STAGE_SFT
from .adapter import LoraAdapter, QLoraModel
from .errors import (
    BadMagicError,
    ChecksumError,
    CheckpointError,
    PtqLoraError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .model import DenseModel, ModelConfig, validate_params
from .quant.apply import QuantizedModel
from .quant.blockwise import DoubleQuantScales, QuantizedTensor

MAGIC = b"PQLR"
VERSION = 1
DT_F32, DT_F64, DT_Q4 = 0, 1, 2
_DTYPES = {DT_F32: np.dtype("<f4"), DT_F64: np.dtype("<f8")}
_CODEBOOKS = ("nf4", "uniform4")
_HEADER = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class DirEntry:
    name: str
    dtype: int
    shape: tuple
    offset: int
    length: int
    codebook: str | None = None
    block_size: int = 0
    double_quant: bool = False
    chunk_size: int = 0
    n_scales: int = 0
    entry_bytes: int = 0  # size of this directory record


def _dense_entry(name, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = DT_F32
    elif arr.dtype == np.float64:
        code = DT_F64
    else:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return code, tuple(arr.shape), data, None


def _q4_payload(q: QuantizedTensor) -> bytes:
    parts = [np.ascontiguousarray(q.codes, dtype=np.uint8).tobytes()]
    if isinstance(q.scales, DoubleQuantScales):
        parts.append(q.scales.offsets.astype("<f4").tobytes())
        parts.append(q.scales.second_scales.astype("<f4").tobytes())
        parts.append(q.scales.codes.astype(np.int8).tobytes())
    else:
        parts.append(np.asarray(q.scales).astype("<f4").tobytes())
    return b"".join(parts)


def _encode_entry(name: str, dtype: int, shape, offset: int, length: int, q: QuantizedTensor | None) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<BB", dtype, len(shape))]
    out.append(struct.pack(f"<{len(shape)}I", *shape))
    out.append(struct.pack("<QQ", offset, length))
    if q is not None:
        chunk = q.scales.chunk_size if q.double_quant else 0
        out.append(
            struct.pack("<BIBII", _CODEBOOKS.index(q.codebook_id), q.block_size, int(q.double_quant), chunk, q.n_blocks)
        )
    return b"".join(out)


def model_tensors(model) -> tuple[dict, dict]:
    """``(metadata, {name: ndarray | QuantizedTensor})`` for any pipeline model."""
    meta = {"stage_label": model.stage_label, "model_config": model.cfg.to_dict()}
    if isinstance(model, DenseModel):
        meta["kind"] = "dense"
        return meta, dict(model.params)
    if isinstance(model, QLoraModel):
        meta["kind"] = "qlora"
        meta["base_stage_label"] = model.base.stage_label
        meta["lora"] = {n: {"rank": a.rank, "alpha": a.alpha} for n, a in sorted(model.adapters.items())}
        tensors = {**model.base.tensors, **model.base.qweights}
        for n, a in model.adapters.items():
            tensors[f"{n}.lora_A"] = a.A
            tensors[f"{n}.lora_B"] = a.B
        return meta, tensors
    if isinstance(model, QuantizedModel):
        meta["kind"] = "quantized"
        return meta, {**model.tensors, **model.qweights}
    raise CheckpointError(f"cannot serialize {type(model).__name__}")


def serialize(model) -> bytes:
    meta, tensors = model_tensors(model)
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    entries, payload, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, QuantizedTensor):
            data, q, code, shape = _q4_payload(t), t, DT_Q4, t.shape
        else:
            code, shape, data, q = _dense_entry(name, t)
        entries.append(_encode_entry(name, code, shape, offset, len(data), q))
        payload.append(data)
        offset += len(data)
    body = b"".join(
        [struct.pack("<I", len(meta_raw)), meta_raw, struct.pack("<I", len(entries)), *entries, *payload]
    )
    total = _HEADER.size + len(body) + 4
    head = _HEADER.pack(MAGIC, VERSION, total)
    blob = head + body
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def save_checkpoint(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize(model))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf, self.pos, self.end = buf, pos, end

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise CheckpointError("directory runs past the end of the file")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError("directory runs past the end of the file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def _check_envelope(buf: bytes) -> None:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("file shorter than the header")
    _, version, total = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    if total < _HEADER.size + 12:
        raise CheckpointError(f"declared length {total} too small")
    if len(buf) < total:
        raise TruncatedFileError(f"file has {len(buf)} bytes, header declares {total}")
    if len(buf) > total:
        raise CheckpointError(f"{len(buf) - total} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", buf, total - 4)
    if zlib.crc32(buf[: total - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC-32 mismatch")


def parse_header(buf: bytes) -> tuple[dict, list[DirEntry], int]:
    """Validate the envelope and return ``(metadata, directory, payload_start)``."""
    _check_envelope(buf)
    end = len(buf) - 4
    r = _Reader(buf, _HEADER.size, end)
    (meta_len,) = r.take("<I")
    try:
        meta = json.loads(r.bytes(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("metadata is not valid UTF-8 JSON") from None
    if not isinstance(meta, dict):
        raise CheckpointError("metadata must be a JSON object")
    (n_entries,) = r.take("<I")
    entries = []
    for _ in range(n_entries):
        start = r.pos
        (name_len,) = r.take("<H")
        try:
            name = r.bytes(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        dtype, rank = r.take("<BB")
        shape = r.take(f"<{rank}I")
        offset, length = r.take("<QQ")
        extra = {}
        if dtype == DT_Q4:
            cb, block, dq, chunk, n_scales = r.take("<BIBII")
            if cb >= len(_CODEBOOKS) or block < 1 or dq > 1 or (dq and chunk < 1):
                raise CheckpointError(f"{name}: invalid quantization fields")
            extra = dict(codebook=_CODEBOOKS[cb], block_size=block, double_quant=bool(dq), chunk_size=chunk, n_scales=n_scales)
        elif dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {dtype}")
        entries.append(DirEntry(name, dtype, tuple(shape), offset, length, entry_bytes=r.pos - start, **extra))
    payload_start = r.pos
    # Canonical layout only: sorted unique names, contiguous payload, no slack.
    if json.dumps(meta, sort_keys=True).encode("utf-8") != buf[_HEADER.size + 4 : _HEADER.size + 4 + meta_len]:
        raise CheckpointError("metadata is not in canonical form")
    names = [e.name for e in entries]
    if names != sorted(set(names)):
        raise CheckpointError("tensor names must be unique and sorted")
    cursor = 0
    for e in entries:
        if e.offset != cursor:
            raise CheckpointError(f"{e.name}: payload is not contiguous")
        if e.length != _expected_length(e):
            raise CheckpointError(f"{e.name}: length {e.length} inconsistent with its shape")
        cursor += e.length
    if payload_start + cursor != end:
        raise CheckpointError("payload size does not match the directory")
    return meta, entries, payload_start


def _expected_length(e: DirEntry) -> int:
    n = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
    if e.dtype in _DTYPES:
        return n * _DTYPES[e.dtype].itemsize
    if e.n_scales != math.ceil(n / e.block_size):
        return -1
    size = (n + 1) // 2
    if e.double_quant:
        n_chunks = math.ceil(e.n_scales / e.chunk_size)
        return size + 8 * n_chunks + e.n_scales
    return size + 4 * e.n_scales


def _decode_entry(buf: bytes, base: int, e: DirEntry):
    start = base + e.offset
    if e.dtype in _DTYPES:
        arr = np.frombuffer(buf, dtype=_DTYPES[e.dtype], count=e.length // _DTYPES[e.dtype].itemsize, offset=start)
        return arr.astype(_DTYPES[e.dtype].newbyteorder("="), copy=True).reshape(e.shape)
    n = int(np.prod(e.shape, dtype=np.int64))
    n_code_bytes = (n + 1) // 2
    codes = np.frombuffer(buf, dtype=np.uint8, count=n_code_bytes, offset=start).copy()
    pos = start + n_code_bytes
    if e.double_quant:
        n_chunks = math.ceil(e.n_scales / e.chunk_size)
        offsets = np.frombuffer(buf, dtype="<f4", count=n_chunks, offset=pos).astype(np.float32)
        second = np.frombuffer(buf, dtype="<f4", count=n_chunks, offset=pos + 4 * n_chunks).astype(np.float32)
        sc = np.frombuffer(buf, dtype=np.int8, count=e.n_scales, offset=pos + 8 * n_chunks).copy()
        scales = DoubleQuantScales(e.chunk_size, offsets, second, sc)
    else:
        scales = np.frombuffer(buf, dtype="<f4", count=e.n_scales, offset=pos).astype(np.float32)
    if n % 2 and codes.size and codes[-1] >> 4:
        raise CheckpointError(f"{e.name}: non-zero padding nibble")
    return QuantizedTensor(codes, tuple(e.shape), e.block_size, scales, e.codebook)


def deserialize(buf: bytes):
    meta, entries, base = parse_header(buf)
    tensors = {e.name: _decode_entry(buf, base, e) for e in entries}
    try:
        model = _build_model(meta, tensors)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, PtqLoraError) as exc:
        raise CheckpointError(f"checkpoint contents inconsistent: {exc}") from None
    if model_tensors(model)[0] != meta:
        raise CheckpointError("metadata does not describe the stored model")
    return model


def _check_label(label, allowed) -> str:
    if label not in allowed:
        raise CheckpointError(f"stage label {label!r} not valid here")
    return label


def _build_model(meta: dict, tensors: dict):
    cfg = ModelConfig(**meta["model_config"])
    kind = meta.get("kind")
    label = meta["stage_label"]
    ptq = [lab for lab in STAGE_LABELS if lab.startswith("PTQ-") and not lab.endswith("+QLoRA")]
    if kind == "dense":
        _check_label(label, [STAGE_SFT])
        validate_params(tensors, cfg)
        return DenseModel(tensors, cfg, label)
    qweights = {n: t for n, t in tensors.items() if isinstance(t, QuantizedTensor)}
    lora = meta.get("lora", {}) if kind == "qlora" else {}
    lora_names = {f"{n}.{s}" for n in lora for s in ("lora_A", "lora_B")}
    dense = {n: t for n, t in tensors.items() if n not in qweights and n not in lora_names}
    full = dict(dense)
    for n, q in qweights.items():
        full[f"{n}.weight"] = np.zeros(q.shape, dtype=np.float32)
    validate_params(full, cfg)
    if kind == "quantized":
        return QuantizedModel(dense, qweights, cfg, _check_label(label, ptq))
    if kind == "qlora":
        base_label = _check_label(meta["base_stage_label"], ptq)
        _check_label(label, [base_label + "+QLoRA"])
        base = QuantizedModel(dense, qweights, cfg, base_label)
        adapters = {}
        for n, info in lora.items():
            a, b = tensors[f"{n}.lora_A"], tensors[f"{n}.lora_B"]
            r = int(info["rank"])
            if a.shape[0] != r or b.shape[1] != r or b.shape[0] != qweights[n].shape[0] or a.shape[1] != qweights[n].shape[1]:
                raise CheckpointError(f"{n}: adapter shapes inconsistent with rank {r}")
            adapters[n] = LoraAdapter(n, a, b, r, float(info["alpha"]))
        return QLoraModel(base, adapters)
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return deserialize(path.read_bytes())


def read_directory(path) -> list[DirEntry]:
    return parse_header(Path(path).read_bytes())[1]
