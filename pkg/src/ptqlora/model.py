"""Tiny pre-norm decoder-only transformer with hand-derived gradients.

Architecture: token + learned positional embeddings, ``n_layers`` blocks of
(LayerNorm -> causal multi-head attention -> residual, LayerNorm -> GELU MLP ->
residual), final LayerNorm and an output head (optionally tied to the token
embedding). No dropout.

Linear projections are routed through small layer objects so the same
forward/backward code drives the dense model, the quantized model and the
QLoRA model; only the layer objects differ.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tokenizer
from .errors import ConfigError, DataError, ShapeError
from .numerics import (
    DEFAULT_DTYPE,
    IGNORE_INDEX,
    Rng,
    cross_entropy,
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_rows,
    softmax_rows,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = tokenizer.VOCAB_SIZE
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 400
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_layers < 0 or self.d_ff < 1:
            raise ConfigError("invalid layer sizes")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


LINEAR_SUFFIXES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


def linear_names(cfg: ModelConfig) -> list[str]:
    """Names of every attention/MLP projection (the quantization and LoRA targets)."""
    return [f"layers.{i}.{s}" for i in range(cfg.n_layers) for s in LINEAR_SUFFIXES]


def linear_shape(cfg: ModelConfig, name: str) -> tuple[int, int]:
    """``(d_out, d_in)`` of a projection."""
    suffix = name.split(".", 2)[2]
    if suffix == "mlp.up":
        return cfg.d_ff, cfg.d_model
    if suffix == "mlp.down":
        return cfg.d_model, cfg.d_ff
    return cfg.d_model, cfg.d_model


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.max_seq_len, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gamma"] = (cfg.d_model,)
        shapes[f"{p}.ln1.beta"] = (cfg.d_model,)
        for s in LINEAR_SUFFIXES[:4]:
            shapes[f"{p}.{s}.weight"] = (cfg.d_model, cfg.d_model)
            shapes[f"{p}.{s}.bias"] = (cfg.d_model,)
        shapes[f"{p}.ln2.gamma"] = (cfg.d_model,)
        shapes[f"{p}.ln2.beta"] = (cfg.d_model,)
        shapes[f"{p}.mlp.up.weight"] = (cfg.d_ff, cfg.d_model)
        shapes[f"{p}.mlp.up.bias"] = (cfg.d_ff,)
        shapes[f"{p}.mlp.down.weight"] = (cfg.d_model, cfg.d_ff)
        shapes[f"{p}.mlp.down.bias"] = (cfg.d_model,)
    shapes["ln_f.gamma"] = (cfg.d_model,)
    shapes["ln_f.beta"] = (cfg.d_model,)
    if not cfg.tie_embeddings:
        shapes["head.weight"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng, std: float = 0.02, dtype=DEFAULT_DTYPE) -> dict[str, np.ndarray]:
    """GPT-2 style init: N(0, std) matrices, residual projections scaled by 1/sqrt(2L)."""
    params = {}
    resid_std = std / math.sqrt(2 * max(cfg.n_layers, 1))
    for idx, (name, shape) in enumerate(param_shapes(cfg).items()):
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".beta") or name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            s = resid_std if name.endswith(("attn.o.weight", "mlp.down.weight")) else std
            n = int(np.prod(shape))
            params[name] = rng.child(idx).normal(n, 0.0, s, dtype=dtype).reshape(shape)
    return params


def validate_params(params: dict, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names mismatch; missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")


class DenseLinear:
    """``y = x W^T + b`` with trainable weight and bias."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray):
        self.name = name
        self.weight = weight
        self.bias = bias

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def backward(self, x, dy, grads: dict, trainable) -> np.ndarray:
        w_name, b_name = f"{self.name}.weight", f"{self.name}.bias"
        if w_name in trainable:
            grads[w_name] = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        if b_name in trainable:
            grads[b_name] = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        return dy @ self.weight


def dense_linears(params: dict, cfg: ModelConfig) -> dict:
    return {n: DenseLinear(n, params[f"{n}.weight"], params[f"{n}.bias"]) for n in linear_names(cfg)}


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ShapeError(f"tokens must be a non-empty (batch, seq) array, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ShapeError("token id out of range")
    return tokens


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def forward_core(tensors: dict, linears: dict, cfg: ModelConfig, tokens):
    """Shared forward pass. ``tensors`` holds non-projection parameters."""
    tokens = check_tokens(tokens, cfg)
    b, t = tokens.shape
    x = tensors["tok_emb"][tokens] + tensors["pos_emb"][:t]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        c: dict = {}
        h1, c["ln1"] = layer_norm_rows(x, tensors[f"{p}.ln1.gamma"], tensors[f"{p}.ln1.beta"], LN_EPS)
        c["h1"] = h1
        q = _split_heads(linears[f"{p}.attn.q"].forward(h1), cfg.n_heads)
        k = _split_heads(linears[f"{p}.attn.k"].forward(h1), cfg.n_heads)
        v = _split_heads(linears[f"{p}.attn.v"].forward(h1), cfg.n_heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask, -np.inf, scores)
        att = softmax_rows(scores)
        ctx = _merge_heads(att @ v)
        c.update(q=q, k=k, v=v, att=att, ctx=ctx)
        x = x + linears[f"{p}.attn.o"].forward(ctx)
        h2, c["ln2"] = layer_norm_rows(x, tensors[f"{p}.ln2.gamma"], tensors[f"{p}.ln2.beta"], LN_EPS)
        c["h2"] = h2
        up = linears[f"{p}.mlp.up"].forward(h2)
        act, c["gelu"] = gelu(up)
        c["act"] = act
        x = x + linears[f"{p}.mlp.down"].forward(act)
        layers.append(c)
    hf, ln_f = layer_norm_rows(x, tensors["ln_f.gamma"], tensors["ln_f.beta"], LN_EPS)
    head = tensors["tok_emb"] if cfg.tie_embeddings else tensors["head.weight"]
    logits = hf @ head.T
    cache = {"tokens": tokens, "layers": layers, "hf": hf, "ln_f": ln_f}
    return logits, cache


def backward_core(tensors: dict, linears: dict, cfg: ModelConfig, cache: dict, dlogits, trainable) -> dict:
    """Backpropagate ``dlogits``; returns gradients for names in ``trainable`` only."""
    grads: dict[str, np.ndarray] = {}
    tokens = cache["tokens"]
    b, t = tokens.shape
    hf = cache["hf"]
    head_name = "tok_emb" if cfg.tie_embeddings else "head.weight"
    head = tensors[head_name]
    d_tok = None
    if head_name in trainable:
        g = dlogits.reshape(-1, dlogits.shape[-1]).T @ hf.reshape(-1, hf.shape[-1])
        if cfg.tie_embeddings:
            d_tok = g
        else:
            grads[head_name] = g
    dhf = dlogits @ head
    dx, dg, db = layer_norm_backward(dhf, cache["ln_f"])
    _put(grads, trainable, "ln_f.gamma", dg)
    _put(grads, trainable, "ln_f.beta", db)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        c = cache["layers"][i]
        dact = linears[f"{p}.mlp.down"].backward(c["act"], dx, grads, trainable)
        dup = gelu_backward(dact, c["gelu"])
        dh2 = linears[f"{p}.mlp.up"].backward(c["h2"], dup, grads, trainable)
        dres, dg, db = layer_norm_backward(dh2, c["ln2"])
        _put(grads, trainable, f"{p}.ln2.gamma", dg)
        _put(grads, trainable, f"{p}.ln2.beta", db)
        dx = dx + dres

        dctx = linears[f"{p}.attn.o"].backward(c["ctx"], dx, grads, trainable)
        dctx = _split_heads(dctx, cfg.n_heads)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        dv = att.transpose(0, 1, 3, 2) @ dctx
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        dh1 = linears[f"{p}.attn.q"].backward(c["h1"], _merge_heads(dq), grads, trainable)
        dh1 = dh1 + linears[f"{p}.attn.k"].backward(c["h1"], _merge_heads(dk), grads, trainable)
        dh1 = dh1 + linears[f"{p}.attn.v"].backward(c["h1"], _merge_heads(dv), grads, trainable)
        dres, dg, db = layer_norm_backward(dh1, c["ln1"])
        _put(grads, trainable, f"{p}.ln1.gamma", dg)
        _put(grads, trainable, f"{p}.ln1.beta", db)
        dx = dx + dres

    if "pos_emb" in trainable:
        dpos = np.zeros_like(tensors["pos_emb"])
        dpos[:t] = dx.sum(axis=0)
        grads["pos_emb"] = dpos
    if "tok_emb" in trainable:
        demb = np.zeros_like(tensors["tok_emb"])
        np.add.at(demb, tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        if d_tok is not None:
            demb += d_tok
        grads["tok_emb"] = demb
    return grads


def _put(grads, trainable, name, value):
    if name in trainable:
        grads[name] = value


def forward_logits(params: dict, cfg: ModelConfig, tokens):
    """Causal logits ``(batch, seq, vocab)`` plus the activation cache."""
    return forward_core(params, dense_linears(params, cfg), cfg, tokens)


def masked_loss(logits, targets):
    """Cross-entropy over a ``(b, T, V)`` logits block; returns ``(loss, dlogits)``."""
    b, t, v = logits.shape
    loss, dl = cross_entropy(logits.reshape(b * t, v), np.asarray(targets).reshape(b * t), IGNORE_INDEX)
    return loss, dl.reshape(b, t, v)


def loss_and_grads(params: dict, cfg: ModelConfig, batch, frozen=()):
    """Masked next-token loss and gradients for every non-frozen parameter.

    ``batch`` is ``(inputs, targets)``, both ``(b, T)``; ``targets`` holds
    ``IGNORE_INDEX`` at prompt and padding positions. ``frozen`` is a set of
    names or the string ``"all"``.
    """
    inputs, targets = batch
    trainable = set() if frozen == "all" else set(params) - set(frozen)
    logits, cache = forward_logits(params, cfg, inputs)
    loss, dlogits = masked_loss(logits, targets)
    if not trainable:
        return loss, {}
    grads = backward_core(params, dense_linears(params, cfg), cfg, cache, dlogits, trainable)
    return loss, grads


def make_batch(examples, pad_to: int | None = None):
    """Collate ``(ids, is_target)`` pairs into right-padded ``(inputs, targets)``.

    Position ``i`` predicts token ``i + 1``; targets are ``IGNORE_INDEX`` where
    the next token is prompt or padding.
    """
    width = max(len(ids) - 1 for ids, _ in examples)
    if pad_to is not None:
        width = max(width, pad_to)
    inputs = np.full((len(examples), width), tokenizer.PAD, dtype=np.int64)
    targets = np.full((len(examples), width), IGNORE_INDEX, dtype=np.int64)
    for row, (ids, is_target) in enumerate(examples):
        ids = np.asarray(ids, dtype=np.int64)
        n = len(ids) - 1
        inputs[row, :n] = ids[:-1]
        tgt = ids[1:].copy()
        tgt[~np.asarray(is_target[:-1], dtype=bool)] = IGNORE_INDEX
        targets[row, :n] = tgt
    return inputs, targets


class DenseModel:
    """Full-precision model at the SFT stage."""

    def __init__(self, params: dict, cfg: ModelConfig, stage_label: str = "SFT-16bit"):
        self.params = params
        self.cfg = cfg
        self.stage_label = stage_label

    def logits(self, tokens):
        return forward_logits(self.params, self.cfg, tokens)[0]


def _logits_fn(model, cfg):
    if isinstance(model, dict):
        return lambda toks: forward_logits(model, cfg, toks)[0]
    return model.logits


def generate_greedy(model, cfg: ModelConfig, prompt, max_new: int = 800, max_input: int | None = 3200):
    """Argmax decoding of ``prompt SEP ...`` until EOS or ``max_new`` tokens.

    ``prompt`` is a token list (already encoded, without SEP). Prompts longer
    than ``max_input`` keep their last ``max_input`` tokens. Returns the
    generated ids, excluding the terminating EOS.
    """
    return generate_greedy_batch(model, cfg, [prompt], max_new, max_input)[0]


def generate_greedy_batch(model, cfg: ModelConfig, prompts, max_new: int = 800, max_input: int | None = 3200):
    """Batched greedy decoding with right padding.

    Causality means padding to the right of a sequence never influences its
    own next-token logits, so each row decodes exactly as it would alone.
    """
    if not prompts:
        return []
    fn = _logits_fn(model, cfg)
    seqs = []
    for p in prompts:
        if len(p) == 0:
            raise DataError("empty prompt")
        p = tokenizer.truncate_prompt(list(p), max_input)
        seqs.append(p + [tokenizer.SEP])
    prompt_lens = [len(s) for s in seqs]
    done = [False] * len(seqs)
    for _ in range(max_new):
        active = [i for i, d in enumerate(done) if not d and len(seqs[i]) < cfg.max_seq_len]
        if not active:
            break
        width = max(len(seqs[i]) for i in active)
        toks = np.full((len(active), width), tokenizer.PAD, dtype=np.int64)
        for row, i in enumerate(active):
            toks[row, : len(seqs[i])] = seqs[i]
        logits = fn(toks)
        for row, i in enumerate(active):
            nxt = int(np.argmax(logits[row, len(seqs[i]) - 1]))
            if nxt == tokenizer.EOS:
                done[i] = True
            else:
                seqs[i].append(nxt)
        for i in range(len(seqs)):
            if len(seqs[i]) >= cfg.max_seq_len:
                done[i] = True
    return [s[n:] for s, n in zip(seqs, prompt_lens)]
