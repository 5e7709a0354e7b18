"""Supervised fine-tuning loop shared by full-parameter SFT and QLoRA."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, NumericError
from .model import ModelConfig, loss_and_grads, make_batch
from .numerics import Rng
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer/loop settings. Only ``epochs`` and the lr/schedule pairs have published values."""

    epochs: int = 2
    batch_size: int = 16
    lr: float = 3e-3
    schedule: str = "linear"
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return asdict(self)


def format_log_line(step: int, lr: float, loss: float) -> str:
    return f"step {step} lr {lr:.6g} loss {loss:.6f}"


def train_loop(trainable: dict, loss_grad_fn, examples, hp: TrainConfig, rng: Rng, log_lines=None):
    """Run ``hp.epochs`` shuffled passes over ``examples`` with AdamW.

    ``loss_grad_fn(trainable, batch) -> (loss, grads)``. Returns the updated
    trainable dict and a list of per-step losses. Deterministic given ``rng``.
    """
    if not examples:
        raise DataError("empty training dataset")
    n = len(examples)
    steps_per_epoch = math.ceil(n / hp.batch_size)
    sched = LrSchedule(hp.schedule, hp.lr, hp.epochs * steps_per_epoch, hp.warmup_steps)
    state = OptimizerState(hp.beta1, hp.beta2, hp.eps, hp.weight_decay)
    losses = []
    step = 0
    for epoch in range(hp.epochs):
        order = rng.child(epoch).permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = make_batch([examples[i] for i in order[start : start + hp.batch_size]])
            loss, grads = loss_grad_fn(trainable, batch)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            lr = lr_at_step(sched, step)
            trainable, state = adamw_step(trainable, grads, state, lr)
            losses.append(loss)
            if log_lines is not None:
                log_lines.append(format_log_line(step, lr, loss))
            step += 1
        log.debug("epoch %d mean loss %.4f", epoch, float(np.mean(losses[-steps_per_epoch:])))
    return trainable, losses


def train_sft(params: dict, cfg: ModelConfig, examples, hp: TrainConfig, seed: int = 0, log_lines=None):
    """Full-parameter SFT. ``examples`` are ``(ids, is_target)`` pairs."""

    def fn(p, batch):
        return loss_and_grads(p, cfg, batch)

    return train_loop(dict(params), fn, examples, hp, Rng(seed, 1), log_lines)
