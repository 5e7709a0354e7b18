from .apply import METHODS, QuantizedModel, QuantLinear, QuantSettings, collect_calibration, quantize_model, stage_label
from .blockwise import (
    DoubleQuantScales,
    QuantizedTensor,
    bits_per_weight_formula,
    dequantize_blockwise,
    double_quantize_scales,
    pack_codes,
    proxy_loss,
    quantize_blockwise,
    rtn_quantize,
    unpack_codes,
)
from .codebook import Codebook, build_codebook
from .gptq import GptqConfig, gptq_quantize_matrix

__all__ = [
    "METHODS",
    "Codebook",
    "DoubleQuantScales",
    "GptqConfig",
    "QuantLinear",
    "QuantSettings",
    "QuantizedModel",
    "QuantizedTensor",
    "bits_per_weight_formula",
    "build_codebook",
    "collect_calibration",
    "dequantize_blockwise",
    "double_quantize_scales",
    "gptq_quantize_matrix",
    "pack_codes",
    "proxy_loss",
    "quantize_blockwise",
    "quantize_model",
    "rtn_quantize",
    "stage_label",
    "unpack_codes",
]
