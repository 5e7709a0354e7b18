import math

import numpy as np
import pytest

from gradcheck import ABS_FLOOR, REL_TOL, dense_errors
from ptqlora import tokenizer
from ptqlora.errors import DataError, ShapeError
from ptqlora.model import (
    DenseModel,
    ModelConfig,
    forward_logits,
    generate_greedy,
    generate_greedy_batch,
    init_params,
    linear_names,
    loss_and_grads,
    make_batch,
    param_shapes,
    validate_params,
)
from ptqlora.numerics import IGNORE_INDEX, Rng, layer_norm_rows
from ptqlora.optim import (
    LrSchedule,
    OptimizerState,
    adamw_step,
    lr_at_step,
    published_hyperparameters,
)
from ptqlora.sft import TrainConfig, format_log_line, train_sft

SMALL = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32)


def test_tokenizer_roundtrip_and_specials():
    text = "Hello, world!\nline 2"
    assert tokenizer.decode(tokenizer.encode(text)) == text
    assert tokenizer.VOCAB_SIZE == 99
    assert tokenizer.decode([tokenizer.encode("a")[0], tokenizer.EOS, tokenizer.encode("b")[0]]) == "a"


def test_encode_example_targets_cover_response_and_eos():
    ids, tgt = tokenizer.encode_example("ab", "c")
    assert ids == tokenizer.encode("ab") + [tokenizer.SEP] + tokenizer.encode("c") + [tokenizer.EOS]
    # position i is a target when ids[i + 1] is response or EOS
    assert tgt.tolist() == [False, False, True, True, False]


def test_truncate_prompt_keeps_tail():
    assert tokenizer.truncate_prompt([1, 2, 3, 4], 2) == [3, 4]
    assert tokenizer.truncate_prompt([1, 2], None) == [1, 2]


def test_param_shapes_and_validation():
    params = init_params(SMALL, Rng(0))
    validate_params(params, SMALL)
    assert len(linear_names(SMALL)) == 12
    bad = dict(params)
    bad["tok_emb"] = bad["tok_emb"][:5]
    with pytest.raises(ShapeError):
        validate_params(bad, SMALL)


def test_init_deterministic():
    a, b = init_params(SMALL, Rng(7)), init_params(SMALL, Rng(7))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_untrained_loss_near_log_vocab():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32)
    params = init_params(cfg, Rng(0), std=0.02)
    batch = make_batch([tokenizer.encode_example("abc", "defgh")])
    loss, _ = loss_and_grads(params, cfg, batch, frozen="all")
    assert abs(loss - math.log(tokenizer.VOCAB_SIZE)) < 0.05


def test_zero_layer_model_matches_oracle():
    cfg = ModelConfig(d_model=8, n_layers=0, n_heads=2, d_ff=8, max_seq_len=8)
    p = init_params(cfg, Rng(1), std=0.5, dtype=np.float64)
    toks = np.array([[5, 9, 11]])
    x = p["tok_emb"][toks[0]] + p["pos_emb"][:3]
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    h = (x - mu) / np.sqrt(var + 1e-5) * p["ln_f.gamma"] + p["ln_f.beta"]
    expect = h @ p["head.weight"].T
    got = forward_logits(p, cfg, toks)[0][0]
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-12)


def test_causality_future_tokens_do_not_change_past_logits():
    params = init_params(SMALL, Rng(2), std=0.2)
    a = np.array([[5, 6, 7, 8, 9]])
    b = a.copy()
    b[0, 3:] = [40, 41]
    la = forward_logits(params, SMALL, a)[0]
    lb = forward_logits(params, SMALL, b)[0]
    np.testing.assert_array_equal(la[0, :3], lb[0, :3])
    assert not np.allclose(la[0, 3:], lb[0, 3:])


def test_dense_gradients_match_finite_differences():
    errs = dense_errors(seed=3)
    bad = {k: v for k, v in errs.items() if not v < REL_TOL}
    assert not bad, bad


def test_gradcheck_floor_is_tiny():
    assert ABS_FLOOR <= 1e-8


def test_tokens_out_of_range():
    params = init_params(SMALL, Rng(0))
    with pytest.raises((ShapeError, DataError)):
        forward_logits(params, SMALL, np.array([[0, 500]]))
    with pytest.raises((ShapeError, DataError)):
        forward_logits(params, SMALL, np.zeros((1, 40), dtype=np.int64))


def test_make_batch_padding_and_targets():
    ex = [tokenizer.encode_example("a", "b"), tokenizer.encode_example("abcd", "e")]
    inputs, targets = make_batch(ex)
    assert inputs.shape == targets.shape == (2, 6)
    assert inputs[0, 3] == tokenizer.PAD
    assert np.all(targets[0, 3:] == IGNORE_INDEX)
    assert targets[0, 1] == tokenizer.encode("b")[0]


def test_batched_generation_matches_single():
    params = init_params(SMALL, Rng(4), std=0.3)
    model = DenseModel(params, SMALL)
    prompts = [tokenizer.encode("hi"), tokenizer.encode("a longer prompt")]
    batch = generate_greedy_batch(model, SMALL, prompts, max_new=6)
    for p, out in zip(prompts, batch):
        assert generate_greedy(model, SMALL, p, max_new=6) == out
        assert len(out) <= 6


def test_generation_stops_at_max_seq_len():
    params = init_params(SMALL, Rng(4), std=0.3)
    out = generate_greedy(DenseModel(params, SMALL), SMALL, tokenizer.encode("x" * 20), max_new=100)
    assert 20 + 1 + len(out) <= SMALL.max_seq_len


def test_generation_empty_prompt_raises():
    params = init_params(SMALL, Rng(4))
    with pytest.raises(DataError):
        generate_greedy(DenseModel(params, SMALL), SMALL, [])


# ---------------------------------------------------------------- optimizer


def test_published_hyperparameter_table():
    assert published_hyperparameters("Qwen2-7b", "sft", "int") == (3e-5, "linear")
    assert published_hyperparameters("Qwen2-7b", "sft", "ext") == (3e-5, "cosine")
    assert published_hyperparameters("llama2-7b", "bnb+qlora", "int") == (2e-4, "cosine")
    assert published_hyperparameters("mistral-7b-v0.3", "gptq+qlora", "ext") == (5e-4, "linear")


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedules_decay_to_zero(kind):
    s = LrSchedule(kind, 1e-3, 100, warmup_steps=10)
    assert lr_at_step(s, 0) == 0.0
    assert lr_at_step(s, 10) == pytest.approx(1e-3)
    assert lr_at_step(s, 100) == pytest.approx(0.0, abs=1e-18)
    values = [lr_at_step(s, k) for k in range(10, 101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_cosine_midpoint():
    s = LrSchedule("cosine", 2.0, 10)
    assert lr_at_step(s, 5) == pytest.approx(1.0)


def test_adamw_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -0.1, 0.0])}
    new, state = adamw_step(p, g, OptimizerState(), lr=0.1)
    np.testing.assert_allclose(new["w"], [0.9, -1.9, 3.0], atol=1e-6)
    assert state.step == 1
    assert np.array_equal(p["w"], [1.0, -2.0, 3.0])


def test_adamw_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    new, _ = adamw_step(p, {"w": np.array([0.0])}, OptimizerState(weight_decay=0.5), lr=0.1)
    assert new["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, OptimizerState(), 0.1)


def test_train_sft_reduces_loss_and_is_deterministic():
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32)
    ex = [tokenizer.encode_example("copy: ab", "ab")] * 32
    hp = TrainConfig(epochs=10, batch_size=8, lr=1e-2)
    log1, log2 = [], []
    p1, l1 = train_sft(init_params(cfg, Rng(0)), cfg, ex, hp, seed=0, log_lines=log1)
    p2, l2 = train_sft(init_params(cfg, Rng(0)), cfg, ex, hp, seed=0, log_lines=log2)
    assert l1[-1] < l1[0] * 0.5
    assert l1 == l2 and log1 == log2
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert log1[0] == format_log_line(0, hp.lr, l1[0])


def test_train_on_empty_dataset_raises():
    with pytest.raises(DataError):
        train_sft(init_params(SMALL, Rng(0)), SMALL, [], TrainConfig())


def test_layer_norm_eps_matters_for_constant_rows():
    y, _ = layer_norm_rows(np.ones((1, 4)), np.ones(4), np.zeros(4))
    assert np.all(np.isfinite(y))
    assert param_shapes(SMALL)["pos_emb"] == (32, 16)
