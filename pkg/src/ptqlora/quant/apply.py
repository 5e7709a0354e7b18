"""Whole-model post-training quantization of the projection matrices."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, DataError
from ..model import ModelConfig, forward_core, linear_names, dense_linears
from .blockwise import QuantizedTensor, dequantize_blockwise, quantize_blockwise
from .gptq import GptqConfig, gptq_quantize_matrix

METHODS = ("bnb-nf4", "gptq")
_METHOD_TAG = {"bnb-nf4": "BNB", "gptq": "GPTQ"}


def stage_label(method: str, qlora: bool = False) -> str:
    if method not in _METHOD_TAG:
        raise ConfigError(f"unknown quantization method {method!r}")
    label = f"PTQ-{_METHOD_TAG[method]}-4bit"
    return label + "+QLoRA" if qlora else label


@dataclass(frozen=True)
class QuantSettings:
    method: str = "bnb-nf4"
    block_size: int = 64
    chunk_size: int = 256
    double_quant: bool | None = None  # None: on for bnb-nf4, off for gptq
    codebook: str | None = None  # None: nf4 for bnb-nf4, uniform4 for gptq
    damping_ratio: float = 0.01
    calibration_samples: int = 128
    act_order: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown quantization method {self.method!r}")

    @property
    def use_double_quant(self) -> bool:
        return self.method == "bnb-nf4" if self.double_quant is None else self.double_quant

    @property
    def codebook_id(self) -> str:
        if self.codebook is not None:
            return self.codebook
        return "nf4" if self.method == "bnb-nf4" else "uniform4"

    def gptq_config(self) -> GptqConfig:
        return GptqConfig(
            self.damping_ratio,
            self.calibration_samples,
            self.block_size,
            self.act_order,
            self.use_double_quant,
            self.chunk_size,
        )

    def to_dict(self):
        return asdict(self)


class QuantLinear:
    """Frozen projection backed by a 4-bit weight; the dequantized copy is a read-only cache."""

    def __init__(self, name: str, qweight: QuantizedTensor, bias: np.ndarray):
        self.name = name
        self.qweight = qweight
        self.bias = bias
        self._w = None

    @property
    def weight(self) -> np.ndarray:
        if self._w is None:
            self._w = dequantize_blockwise(self.qweight)
            self._w.setflags(write=False)
        return self._w

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def backward(self, x, dy, grads, trainable):
        return dy @ self.weight


class QuantizedModel:
    """Full-precision small tensors plus 4-bit projection weights."""

    def __init__(self, tensors: dict, qweights: dict, cfg: ModelConfig, stage_label: str):
        self.tensors = tensors
        self.qweights = qweights
        self.cfg = cfg
        self.stage_label = stage_label
        self._linears = None

    def linears(self) -> dict:
        if self._linears is None:
            self._linears = {
                n: QuantLinear(n, q, self.tensors[f"{n}.bias"]) for n, q in self.qweights.items()
            }
        return self._linears

    def logits(self, tokens):
        return forward_core(self.tensors, self.linears(), self.cfg, tokens)[0]

    def dequantized_params(self) -> dict:
        out = dict(self.tensors)
        for n, lin in self.linears().items():
            out[f"{n}.weight"] = np.array(lin.weight)
        return out

    def density_bits_per_weight(self) -> float:
        bits = sum(q.storage_bits() for q in self.qweights.values())
        return bits / sum(q.size for q in self.qweights.values())


class _Recorder:
    """Wraps a dense layer and stores its inputs for calibration."""

    def __init__(self, inner, sink: list):
        self.inner = inner
        self.sink = sink

    def forward(self, x):
        self.sink.append(x.reshape(-1, x.shape[-1]))
        return self.inner.forward(x)


def collect_calibration(params: dict, cfg: ModelConfig, batches) -> dict[str, np.ndarray]:
    """Input activations (features x samples) of every projection, from one dense forward pass.

    ``batches`` yields ``(inputs, valid)`` pairs: token arrays and a boolean
    mask of real (non-padding) positions.
    """
    sinks: dict[str, list] = {n: [] for n in linear_names(cfg)}
    masks = []
    for inputs, valid in batches:
        rec = {n: _Recorder(lin, sinks[n]) for n, lin in dense_linears(params, cfg).items()}
        forward_core(params, rec, cfg, inputs)
        masks.append(np.asarray(valid, dtype=bool).reshape(-1))
    if not masks:
        raise DataError("no calibration batches")
    keep = np.concatenate(masks)
    return {n: np.concatenate(chunks, axis=0)[keep].T.astype(np.float64) for n, chunks in sinks.items()}


def quantize_model(params: dict, cfg: ModelConfig, settings: QuantSettings, calibration: dict | None = None) -> QuantizedModel:
    """Quantize all attention and MLP projection weights; every other tensor is kept as-is."""
    targets = linear_names(cfg)
    if settings.method == "gptq":
        if calibration is None or any(n not in calibration for n in targets):
            raise DataError("gptq needs calibration activations for every target layer")
    tensors = {k: v for k, v in params.items() if not (k.endswith(".weight") and k[: -len(".weight")] in targets)}
    qweights = {}
    for name in targets:
        w = params[f"{name}.weight"]
        if settings.method == "gptq":
            qweights[name] = gptq_quantize_matrix(w, calibration[name], settings.gptq_config(), settings.codebook_id)
        else:
            qweights[name] = quantize_blockwise(
                w, settings.block_size, settings.codebook_id, settings.use_double_quant, settings.chunk_size
            )
    return QuantizedModel(tensors, qweights, cfg, stage_label(settings.method))
