import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masklab.model import (ConfigError, MaskPolicy, ModelConfig, build_attention_mask, embed_input,
                           init_params, model_forward, parse_schedule, preset, sinusoidal_pe)
from masklab.objectives import LmBatch, Objective, batch_loss
from masklab.optim import AdamState, adam_step
from masklab.probes import random_probe_params
from masklab.tensor import Tape
from oracles import gradient_errors, sinusoid, unrolled_forward

BI, LR, RL = MaskPolicy.BIDIRECTIONAL, MaskPolicy.CAUSAL_LR, MaskPolicy.CAUSAL_RL


def small(pe="absent", name="bert", **kw):
    base = ModelConfig(**{**dict(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=32, max_seq_len=8,
                                 pe_kind=pe), **kw})
    return preset(name, base)


def test_masks():
    assert build_attention_mask(LR, 3).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]
    assert build_attention_mask(RL, 3).tolist() == [[1, 1, 1], [0, 1, 1], [0, 0, 1]]
    assert build_attention_mask(BI, 5).sum() == 25
    for p in MaskPolicy:
        assert build_attention_mask(p, 7).diagonal().all()
    with pytest.raises(ValueError):
        build_attention_mask(BI, 0)


def test_sinusoidal_table():
    pe = sinusoidal_pe(16, 8)
    assert np.all(pe[0, 0::2] == 0.0) and np.all(pe[0, 1::2] == 1.0)
    assert abs(pe[1, 0] - 0.841471) < 1e-6
    for i, k in [(1, 0), (3, 5), (15, 7), (9, 2)]:
        assert abs(pe[i, k] - sinusoid(i, k, 8)) < 1e-12
    with pytest.raises(ConfigError):
        sinusoidal_pe(4, 7)


def test_presets():
    base = ModelConfig(n_layers=12)
    assert preset("decbert_same", base).mask_schedule == (LR, LR) + (BI,) * 10
    assert preset("decbert_diff", base).mask_schedule == (LR, RL) + (BI,) * 10
    assert preset("bert", base).mask_schedule == (BI,) * 12
    assert preset("gpt_decoder", base).mask_schedule == (LR,) * 12
    with pytest.raises(ConfigError):
        preset("decbert_same", ModelConfig(n_layers=1))
    with pytest.raises(ConfigError):
        preset("roberta", base)


def test_presets_share_parameter_count():
    counts = {name: init_params(small("learnable", name), np.random.default_rng(0)).count()
              for name in ("bert", "decbert_same", "decbert_diff", "gpt_decoder")}
    assert len(set(counts.values())) == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=3, mask_schedule=(BI, BI))
    with pytest.raises(ConfigError):
        ModelConfig(d_model=7, n_heads=7, pe_kind="sinusoidal")
    assert ModelConfig(d_model=64, n_heads=4).d_head == 16
    assert parse_schedule("lr, rl,bi") == (LR, RL, BI)


def test_embed_input_cases():
    cfg = small("absent")
    p = init_params(cfg, np.random.default_rng(1))
    tokens = np.array([3, 1, 4, 1, 5])
    assert np.array_equal(embed_input(tokens, p, cfg).data, p["tok_emb"].data[tokens])

    cfg_s = small("sinusoidal")
    p = init_params(cfg_s, np.random.default_rng(1))
    p["tok_emb"].data[:] = 0
    np.testing.assert_array_equal(embed_input(tokens, p, cfg_s).data, sinusoidal_pe(8, 16, np.float32)[:5])

    cfg_l = small("learnable")
    p = init_params(cfg_l, np.random.default_rng(2))
    expected = np.stack([p["tok_emb"].data[t] + p["pos_emb"].data[i] for i, t in enumerate(tokens)])
    np.testing.assert_array_equal(embed_input(tokens, p, cfg_l).data, expected)

    with pytest.raises(IndexError):
        embed_input(np.array([32]), p, cfg_l)
    with pytest.raises(ValueError, match="max_seq_len"):
        embed_input(np.zeros(9, dtype=int), p, cfg_l)


def test_logits_shape():
    cfg = small("learnable")
    p = init_params(cfg, np.random.default_rng(0))
    assert model_forward(np.zeros(6, dtype=int), p, cfg).shape == (6, 32)
    assert model_forward(np.zeros((3, 8), dtype=int), p, cfg).shape == (3, 8, 32)


@pytest.mark.parametrize("schedule", ["bi,bi", "lr,rl", "rl,lr", "lr,lr"])
@pytest.mark.parametrize("pe", ["absent", "learnable"])
def test_forward_matches_unrolled_oracle(schedule, pe):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=12, vocab_size=16, max_seq_len=4,
                      mask_schedule=parse_schedule(schedule), pe_kind=pe, precision=64)
    rng = np.random.default_rng(3)
    p = init_params(cfg, rng)
    for t in p.tensors.values():  # larger weights make the check less forgiving
        t.data = rng.normal(0, 0.5, size=t.shape)
    tokens = [5, 0, 15, 5]
    pe_rows = p["pos_emb"].data.tolist() if pe != "absent" else None
    want = unrolled_forward(tokens, {k: t.data for k, t in p.tensors.items()}, schedule.split(","), 2, pe_rows)
    np.testing.assert_allclose(model_forward(np.array(tokens), p, cfg).data, want, atol=1e-5)


def test_batched_forward_matches_per_sequence():
    cfg = small("learnable", "decbert_diff", precision=64)
    p = init_params(cfg, np.random.default_rng(4))
    tokens = np.random.default_rng(5).integers(0, 32, size=(3, 8))
    batched = model_forward(tokens, p, cfg).data
    for r in range(3):
        np.testing.assert_allclose(batched[r], model_forward(tokens[r], p, cfg).data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bidirectional_without_pe_is_permutation_equivariant(seed):
    cfg = small("absent")
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng)
    x = rng.integers(0, 32, size=8)
    perm = rng.permutation(8)
    out = model_forward(x, p, cfg).data
    assert np.abs(model_forward(x[perm], p, cfg).data - out[perm]).max() < 1e-4


@pytest.mark.parametrize("name", ["decbert_same", "decbert_diff", "gpt_decoder"])
def test_causal_layer_breaks_equivariance(name):
    cfg = small("absent", name)
    p = random_probe_params(cfg, 6)
    x = np.arange(8)
    perm = np.arange(8)
    perm[[3, 4]] = [4, 3]
    out = model_forward(x, p, cfg).data
    assert np.abs(model_forward(x[perm], p, cfg).data - out[perm]).max() > 1e-2


def test_gpt_decoder_logits_ignore_future_tokens():
    cfg = small("learnable", "gpt_decoder")
    p = init_params(cfg, np.random.default_rng(7))
    x = np.random.default_rng(8).integers(0, 32, size=8)
    base = model_forward(x, p, cfg).data
    for j in range(8):
        y = x.copy()
        y[j] = (y[j] + 7) % 32
        out = model_forward(y, p, cfg).data
        assert np.array_equal(out[:j], base[:j])
        assert not np.array_equal(out[j], base[j])


@pytest.mark.parametrize("name,pe", [("decbert_diff", "learnable"), ("bert", "sinusoidal")])
def test_model_gradients_match_finite_differences(name, pe):
    cfg = dataclasses.replace(small(pe, name), n_layers=2, d_model=8, d_ffn=8, vocab_size=12, max_seq_len=5,
                              precision=64)
    cfg = preset(name, cfg)
    p = init_params(cfg, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    for t in p.trainable().values():
        t.data = t.data + rng.normal(0, 0.3, size=t.shape)
    tokens = rng.integers(0, 12, size=(2, 5))
    targets = np.where(rng.random((2, 5)) < 0.5, tokens, -100)
    targets[0, 0] = tokens[0, 0]
    batch = LmBatch(tokens, targets, Objective.MLM)
    with Tape() as tape:
        loss = batch_loss(p, batch, cfg)
    tape.backward(loss)
    errs = gradient_errors(p.trainable(), lambda: batch_loss(p, batch, cfg).item())
    assert max(e.max() for e in errs.values()) < 1e-3
    assert "pos_emb" not in errs or pe == "learnable"


def test_sinusoidal_table_frozen_through_training():
    cfg = small("sinusoidal")
    p = init_params(cfg, np.random.default_rng(11))
    before = p["pos_emb"].data.copy()
    train = p.trainable()
    assert "pos_emb" not in train
    state = AdamState.for_params(train)
    rng = np.random.default_rng(12)
    for _ in range(3):
        tokens = rng.integers(0, 32, size=(2, 8))
        p.zero_grad()
        with Tape() as tape:
            loss = batch_loss(p, LmBatch(tokens, tokens, Objective.MLM), cfg)
        tape.backward(loss)
        adam_step(train, {k: t.grad for k, t in train.items()}, state, 1e-2, 0.01, p.decay_names())
    assert p["pos_emb"].grad is None
    assert np.array_equal(p["pos_emb"].data, before)


def test_decay_names_exclude_biases_and_layer_norm():
    p = init_params(small("learnable"), np.random.default_rng(0))
    names = p.decay_names()
    assert "tok_emb" in names and "layers.0.w_q" in names
    assert not any(n.endswith(("beta", "gamma")) or ".b" in n or n == "head.bias" for n in names)


def test_init_statistics():
    p = init_params(ModelConfig(), np.random.default_rng(0))
    assert abs(p["tok_emb"].data.std() - 0.02) < 1e-3
    assert np.all(p["layers.0.b_q"].data == 0) and np.all(p["layers.1.ln2.gamma"].data == 1)
    assert p["tok_emb"].dtype == np.float32
