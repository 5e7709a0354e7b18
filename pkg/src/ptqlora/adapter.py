"""LoRA adapters on a frozen 4-bit base and the QLoRA fine-tuning stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import ModelConfig, forward_core, backward_core, linear_shape, masked_loss
from .numerics import Rng
from .quant.apply import QuantizedModel
from .sft import TrainConfig, train_loop


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    target_layer: str
    A: np.ndarray  # (r, d_in)
    B: np.ndarray  # (d_out, r)
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def delta(self) -> np.ndarray:
        return (self.scaling * (self.B @ self.A)).astype(self.A.dtype)


def init_lora(cfg: ModelConfig, targets, r: int = 8, alpha: float = 16.0, rng: Rng | None = None,
              available=None, dtype=np.float32) -> dict[str, LoraAdapter]:
    """``A ~ N(0, 0.02^2)`` from a seeded stream per target, ``B = 0``."""
    targets = list(targets)
    if not targets:
        raise ConfigError("no LoRA targets given")
    if r < 1:
        raise ConfigError("LoRA rank must be >= 1")
    rng = rng or Rng(0)
    out = {}
    for i, name in enumerate(targets):
        if available is not None and name not in available:
            raise ConfigError(f"unknown LoRA target layer {name!r}")
        try:
            d_out, d_in = linear_shape(cfg, name)
        except (IndexError, ValueError):
            raise ConfigError(f"unknown LoRA target layer {name!r}") from None
        a = rng.child(1000 + i).normal(r * d_in, 0.0, 0.02, dtype=dtype).reshape(r, d_in)
        out[name] = LoraAdapter(name, a, np.zeros((d_out, r), dtype=dtype), r, float(alpha))
    return out


class LoraLinear:
    """``y = dequant(W_q) x + b + (alpha/r) B (A x)``; only A and B are trainable."""

    def __init__(self, base, adapter: LoraAdapter):
        self.base = base
        self.adapter = adapter
        self.name = base.name

    def forward(self, x):
        ad = self.adapter
        return self.base.forward(x) + ad.scaling * ((x @ ad.A.T) @ ad.B.T)

    def backward(self, x, dy, grads, trainable):
        ad = self.adapter
        s = ad.scaling
        xa = x @ ad.A.T
        d_xa = s * (dy @ ad.B)
        a_name, b_name = f"{self.name}.lora_A", f"{self.name}.lora_B"
        if b_name in trainable:
            grads[b_name] = s * (dy.reshape(-1, dy.shape[-1]).T @ xa.reshape(-1, xa.shape[-1]))
        if a_name in trainable:
            grads[a_name] = d_xa.reshape(-1, d_xa.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return self.base.backward(x, dy, grads, trainable) + d_xa @ ad.A


class QLoraModel:
    def __init__(self, base: QuantizedModel, adapters: dict[str, LoraAdapter], method: str | None = None):
        missing = set(adapters) - set(base.qweights)
        if missing:
            raise ConfigError(f"adapter targets absent from the quantized base: {sorted(missing)}")
        self.base = base
        self.adapters = adapters
        self.cfg = base.cfg
        self.method = method
        self.stage_label = base.stage_label + "+QLoRA"

    def linears(self) -> dict:
        lin = dict(self.base.linears())
        for name, ad in self.adapters.items():
            lin[name] = LoraLinear(lin[name], ad)
        return lin

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for name, ad in self.adapters.items():
            out[f"{name}.lora_A"] = ad.A
            out[f"{name}.lora_B"] = ad.B
        return out

    def with_trainable(self, tensors: dict) -> "QLoraModel":
        ads = {
            n: LoraAdapter(n, tensors[f"{n}.lora_A"], tensors[f"{n}.lora_B"], ad.rank, ad.alpha)
            for n, ad in self.adapters.items()
        }
        return QLoraModel(self.base, ads, self.method)

    def logits(self, tokens):
        return qlora_forward(self, tokens)[0]


def qlora_forward(m: QLoraModel, tokens):
    return forward_core(m.base.tensors, m.linears(), m.cfg, tokens)


def qlora_loss_and_grads(m: QLoraModel, batch):
    """Masked loss and gradients for the adapter tensors only."""
    inputs, targets = batch
    logits, cache = qlora_forward(m, inputs)
    loss, dlogits = masked_loss(logits, targets)
    grads = backward_core(m.base.tensors, m.linears(), m.cfg, cache, dlogits, set(m.trainable()))
    return loss, grads


def train_qlora(m: QLoraModel, examples, hp: TrainConfig, seed: int = 0, log_lines=None):
    """Second SFT round through the frozen quantized base; returns ``(model, losses)``."""

    def fn(tensors, batch):
        return qlora_loss_and_grads(m.with_trainable(tensors), batch)

    trained, losses = train_loop(m.trainable(), fn, examples, hp, Rng(seed, 3), log_lines)
    return m.with_trainable(trained), losses


def merge_and_export(m: QLoraModel) -> dict[str, np.ndarray]:
    """Dense parameters with ``dequant(W_q) + (alpha/r) B A`` folded into each adapted weight."""
    params = m.base.dequantized_params()
    for name, ad in m.adapters.items():
        w = params[f"{name}.weight"]
        d = ad.delta()
        if d.shape != w.shape:
            raise ShapeError(f"{name}: adapter delta {d.shape} vs weight {w.shape}")
        params[f"{name}.weight"] = (w + d).astype(w.dtype)
    return params
