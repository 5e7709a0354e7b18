"""AdamW and the linear/cosine learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

# Learning rate and scheduler per (base model, stage, data source) as used
# for the 7B runs. Stage keys: "sft", "bnb+qlora", "gptq+qlora"; source:
# "int" (internal tasks) or "ext" (public tasks).
PUBLISHED_HYPERPARAMETERS = {
    ("qwen2-7b", "sft"): {"int": (3e-5, "linear"), "ext": (3e-5, "cosine")},
    ("qwen2-7b", "bnb+qlora"): {"int": (3e-5, "cosine"), "ext": (3e-5, "cosine")},
    ("qwen2-7b", "gptq+qlora"): {"int": (3e-5, "cosine"), "ext": (3e-5, "cosine")},
    ("llama2-7b", "sft"): {"int": (6e-6, "linear"), "ext": (6e-6, "linear")},
    ("llama2-7b", "bnb+qlora"): {"int": (2e-4, "cosine"), "ext": (5e-4, "linear")},
    ("llama2-7b", "gptq+qlora"): {"int": (5e-4, "cosine"), "ext": (5e-4, "linear")},
    ("mistral-7b-v0.3", "sft"): {"int": (6e-6, "linear"), "ext": (6e-6, "linear")},
    ("mistral-7b-v0.3", "bnb+qlora"): {"int": (5e-4, "linear"), "ext": (5e-4, "linear")},
    ("mistral-7b-v0.3", "gptq+qlora"): {"int": (5e-4, "linear"), "ext": (5e-4, "linear")},
}


def published_hyperparameters(model: str, stage: str, source: str = "int") -> tuple[float, str]:
    """``(learning_rate, scheduler_kind)`` from the published table."""
    try:
        return PUBLISHED_HYPERPARAMETERS[(model.lower(), stage.lower())][source.lower()]
    except KeyError:
        raise ConfigError(f"no published hyperparameters for {model!r}/{stage!r}/{source!r}") from None


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    base_lr: float
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps]")


def lr_at_step(s: LrSchedule, step: int) -> float:
    """Linear warmup from 0, then linear or cosine decay to exactly 0 at ``total_steps``."""
    if not 0 <= step <= s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    decay_len = s.total_steps - s.warmup_steps
    if decay_len == 0:
        return s.base_lr
    progress = (step - s.warmup_steps) / decay_len
    if s.kind == "linear":
        return s.base_lr * (1.0 - progress)
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float) -> tuple[dict, OptimizerState]:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns new dicts; input arrays are not modified. Every parameter named in
    ``grads`` is decayed and updated; other parameters pass through untouched.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise ShapeError(f"gradients for unknown parameters: {sorted(unknown)}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name in sorted(grads):
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        decayed = p * (1.0 - lr * state.weight_decay) if state.weight_decay else p
        new_params[name] = (decayed - lr * update).astype(p.dtype, copy=False)
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(b1, b2, state.eps, state.weight_decay, step, new_m, new_v)
    return new_params, new_state
