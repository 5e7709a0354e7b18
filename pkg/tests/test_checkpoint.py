import struct
import zlib

import numpy as np
import pytest

from ptqlora.adapter import QLoraModel, init_lora
from ptqlora.checkpoint import (
    MAGIC,
    deserialize,
    load_checkpoint,
    read_directory,
    save_checkpoint,
    serialize,
)
from ptqlora.errors import (
    BadMagicError,
    ChecksumError,
    CheckpointError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ptqlora.model import DenseModel, ModelConfig, init_params, linear_names
from ptqlora.numerics import Rng
from ptqlora.quant import QuantSettings, quantize_model

CFG = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=40, max_seq_len=16)
TOKS = np.array([[5, 17, 30, 2, 44]])


def dense():
    return DenseModel(init_params(CFG, Rng(0), std=0.1), CFG)


def quantized(double_quant=True):
    return quantize_model(dense().params, CFG, QuantSettings("bnb-nf4", block_size=16, double_quant=double_quant, chunk_size=8))


def qlora():
    base = quantized()
    ads = init_lora(CFG, linear_names(CFG)[:3], r=2, alpha=4, rng=Rng(1))
    m = QLoraModel(base, ads)
    tr = {k: v + 0.01 for k, v in m.trainable().items()}
    return m.with_trainable(tr)


def _resealed(buf: bytearray) -> bytes:
    """Recompute the trailing CRC so a mutation reaches the structural checks."""
    body = bytes(buf[:-4])
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_dense_roundtrip_bit_exact(tmp_path):
    m = dense()
    back = load_checkpoint(save_checkpoint(m, tmp_path / "d.pqlr"))
    assert back.stage_label == "SFT-16bit" and back.cfg == CFG
    for k, v in m.params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()


@pytest.mark.parametrize("dq", [True, False])
def test_quantized_roundtrip(dq, tmp_path):
    m = quantized(dq)
    back = load_checkpoint(save_checkpoint(m, tmp_path / "q.pqlr"))
    for n, q in m.qweights.items():
        b = back.qweights[n]
        assert np.array_equal(b.codes, q.codes)
        assert np.array_equal(b.scale_values(), q.scale_values())
    assert back.logits(TOKS).tobytes() == m.logits(TOKS).tobytes()


def test_qlora_roundtrip_logits_identical(tmp_path):
    m = qlora()
    back = load_checkpoint(save_checkpoint(m, tmp_path / "a.pqlr"))
    assert back.stage_label == "PTQ-BNB-4bit+QLoRA"
    for n, ad in m.adapters.items():
        assert back.adapters[n].A.tobytes() == ad.A.tobytes()
        assert back.adapters[n].alpha == ad.alpha
    assert back.logits(TOKS).tobytes() == m.logits(TOKS).tobytes()


def test_serialization_is_deterministic():
    assert serialize(qlora()) == serialize(qlora())
    assert serialize(deserialize(serialize(qlora()))) == serialize(qlora())


def test_bad_magic():
    buf = bytearray(serialize(dense()))
    buf[:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        deserialize(bytes(buf))


def test_unsupported_version():
    buf = bytearray(serialize(dense()))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        deserialize(_resealed(buf))


def test_truncated():
    buf = serialize(dense())
    for cut in (0, 3, 10, len(buf) // 2, len(buf) - 1):
        with pytest.raises(TruncatedFileError):
            deserialize(buf[:cut])


def test_checksum_mismatch():
    buf = bytearray(serialize(dense()))
    buf[len(buf) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        deserialize(bytes(buf))


def test_trailing_bytes_rejected():
    with pytest.raises(CheckpointError):
        deserialize(serialize(dense()) + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.pqlr")


def test_magic_constant():
    assert serialize(dense())[:4] == MAGIC == b"PQLR"


def test_fuzz_mutations_fail_gracefully():
    """Random flips, truncations and CRC-resealed edits are either rejected with a
    checkpoint error or (never, here) decode to the identical file."""
    originals = [serialize(dense()), serialize(quantized()), serialize(qlora())]
    rng = np.random.default_rng(0)
    rejected = 0
    for i in range(2000):
        buf = bytearray(originals[i % 3])
        kind = i % 4
        if kind == 0:
            pos = int(rng.integers(0, len(buf)))
            buf[pos] ^= 1 << int(rng.integers(0, 8))
            data = bytes(buf)
        elif kind == 1:
            data = bytes(buf[: int(rng.integers(0, len(buf)))])
        elif kind == 2:
            # structural edit inside the header/directory, CRC recomputed
            pos = int(rng.integers(16, min(len(buf) - 4, 600)))
            buf[pos] = int(rng.integers(0, 256))
            data = _resealed(buf)
        else:
            data = bytes(buf) + bytes(rng.integers(0, 256, int(rng.integers(1, 9)), dtype=np.uint8))
        try:
            m = deserialize(data)
        except CheckpointError:
            rejected += 1
            continue
        # accepted: must be a file that save would have produced
        assert serialize(m) == data
    assert rejected > 1900


def test_directory_reports_payload_bytes(tmp_path):
    path = save_checkpoint(quantized(), tmp_path / "q.pqlr")
    entries = {e.name: e for e in read_directory(path)}
    e = entries["layers.0.mlp.up"]
    assert e.codebook == "nf4" and e.block_size == 16 and e.double_quant and e.chunk_size == 8
    n = 40 * 16
    assert e.length == n // 2 + n // 16 + 8 * ((n // 16 + 7) // 8)
