import numpy as np
import pytest

from gradcheck import REL_TOL, adapter_errors
from ptqlora import tokenizer
from ptqlora.adapter import QLoraModel, init_lora, merge_and_export, train_qlora
from ptqlora.errors import ConfigError
from ptqlora.model import ModelConfig, forward_logits, init_params, linear_names
from ptqlora.numerics import Rng
from ptqlora.quant import QuantSettings, quantize_model
from ptqlora.sft import TrainConfig

CFG = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=32)


def _base():
    params = init_params(CFG, Rng(0), std=0.1)
    return quantize_model(params, CFG, QuantSettings("bnb-nf4", block_size=16))


def test_init_b_zero_and_a_scale():
    ads = init_lora(CFG, linear_names(CFG), r=4, alpha=8, rng=Rng(1))
    for name, ad in ads.items():
        assert np.all(ad.B == 0)
        assert ad.scaling == 2.0
    a = np.concatenate([ad.A.reshape(-1) for ad in ads.values()])
    assert abs(a.std() - 0.02) < 0.003


def test_adapter_shapes_follow_layers():
    ads = init_lora(CFG, ["layers.0.mlp.up", "layers.0.mlp.down"], r=3, rng=Rng(0))
    assert ads["layers.0.mlp.up"].A.shape == (3, 16) and ads["layers.0.mlp.up"].B.shape == (32, 3)
    assert ads["layers.0.mlp.down"].A.shape == (3, 32) and ads["layers.0.mlp.down"].B.shape == (16, 3)


def test_fresh_adapters_do_not_change_outputs():
    base = _base()
    m = QLoraModel(base, init_lora(CFG, linear_names(CFG), rng=Rng(1)))
    toks = np.array([[4, 5, 6, 7]])
    np.testing.assert_array_equal(m.logits(toks), base.logits(toks))
    assert m.stage_label == "PTQ-BNB-4bit+QLoRA"


def test_unknown_target_rejected():
    with pytest.raises(ConfigError):
        init_lora(CFG, ["layers.3.attn.q"], rng=Rng(0), available=linear_names(CFG))
    with pytest.raises(ConfigError):
        init_lora(CFG, [], rng=Rng(0))


def test_adapter_gradients_match_finite_differences():
    errs = adapter_errors(seed=1)
    bad = {k: v for k, v in errs.items() if not v < REL_TOL}
    assert not bad, bad


def test_training_touches_only_adapters_and_merge_matches():
    base = _base()
    codes_before = {n: q.codes.copy() for n, q in base.qweights.items()}
    tensors_before = {n: t.copy() for n, t in base.tensors.items()}
    m = QLoraModel(base, init_lora(CFG, linear_names(CFG), r=4, alpha=8, rng=Rng(2)))
    ex = [tokenizer.encode_example("copy: ab", "ab")] * 16
    trained, losses = train_qlora(m, ex, TrainConfig(epochs=4, batch_size=8, lr=1e-2), seed=0)
    assert losses[-1] < losses[0]
    assert any(np.any(ad.B != 0) for ad in trained.adapters.values())
    for n, q in trained.base.qweights.items():
        assert np.array_equal(q.codes, codes_before[n])
    for n, t in trained.base.tensors.items():
        assert np.array_equal(t, tensors_before[n])
    merged = merge_and_export(trained)
    toks = np.array([[10, 11, 12, 13, 14]])
    np.testing.assert_allclose(forward_logits(merged, CFG, toks)[0], trained.logits(toks), atol=1e-4)


def test_train_qlora_deterministic():
    ex = [tokenizer.encode_example("x", "yz")] * 8
    hp = TrainConfig(epochs=1, batch_size=4, lr=1e-2)
    runs = []
    for _ in range(2):
        m = QLoraModel(_base(), init_lora(CFG, linear_names(CFG), rng=Rng(3)))
        runs.append(train_qlora(m, ex, hp, seed=5))
    (m1, l1), (m2, l2) = runs
    assert l1 == l2
    for n in m1.adapters:
        assert np.array_equal(m1.adapters[n].A, m2.adapters[n].A)
        assert np.array_equal(m1.adapters[n].B, m2.adapters[n].B)
