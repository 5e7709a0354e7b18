"""Desk-scale PTQ + QLoRA pipeline: SFT, 4-bit post-training quantization, adapter recovery."""

__version__ = "0.1.0"

STAGE_SFT = "SFT-16bit"
STAGE_LABELS = (
    "SFT-16bit",
    "PTQ-BNB-4bit",
    "PTQ-GPTQ-4bit",
    "PTQ-BNB-4bit+QLoRA",
    "PTQ-GPTQ-4bit+QLoRA",
)
