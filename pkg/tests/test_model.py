import math
from dataclasses import replace

import numpy as np
import pytest

from sdlab import autograd as ag
from sdlab.model import (
    InvalidConfigError,
    LayerSpec,
    Model,
    ModelConfig,
    config_census,
    forward_loss,
    perplexity,
    stride_windows,
    uniform_config,
)


def tiny(mech="sd", ln=False, **kw):
    base = dict(n_layers=2, heads=2, d_head=8, layer_norm=ln, d_model=16, context=32)
    base.update(kw)
    return uniform_config(mech, **base)


def test_same_seed_bit_identical():
    a = Model.build(tiny(), seed=3)
    b = Model.build(tiny(), seed=3)
    c = Model.build(tiny(), seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert not np.array_equal(a.params["tok_emb"].data, c.params["tok_emb"].data)


def test_init_scheme():
    m = Model.build(tiny(ln=True), seed=0)
    assert np.all(m.params["layers.0.attn.b_d"].data == 0)
    assert np.all(m.params["layers.0.ln1.g"].data == 1)
    assert np.all(m.params["layers.0.ffn.b1"].data == 0)
    assert abs(m.params["layers.0.attn.w_q"].data.std() - 0.02) < 0.005


def test_paper_scale_attention_census_without_allocation():
    std = uniform_config("standard", n_layers=12, heads=12, d_head=64, d_model=768, context=1024)
    assert config_census(std)["attention_weights"] == 28_311_552 == 12 * 4 * 768 * 768
    sd = uniform_config("sd", n_layers=12, heads=12, d_head=64, d_model=768, context=1024)
    assert config_census(sd)["damping"] == 110_736 == 12 * (768 * 12 + 12)


@pytest.mark.parametrize("mech", ["standard", "sd", "linear"])
def test_census_matches_stored_values(mech):
    cfg = ModelConfig(d_model=24, context=16, layers=(LayerSpec(mech, 3, 8), LayerSpec(mech, 6, 4, True)))
    m = Model.build(cfg)
    c = config_census(cfg)
    assert m.n_parameters() == c["total"]
    assert m.attention_weight_census() == c["attention_weights"]
    assert m.damping_param_census() == c["damping"]


def test_invalid_config_enumerates_fields():
    cfg = ModelConfig(d_model=0, epsilon=-1.0, layers=(LayerSpec("flash", 0, 4),))
    with pytest.raises(InvalidConfigError) as err:
        cfg.validate()
    text = str(err.value)
    for field in ("d_model", "epsilon", "layers[0].mechanism", "layers[0]"):
        assert field in text
    assert len(err.value.problems) >= 4


def test_untrained_loss_near_log_vocab():
    m = Model.build(tiny(), seed=0)
    rng = np.random.default_rng(0)
    batch = rng.integers(0, 256, (4, 33))
    loss = float(forward_loss(m, batch).data)
    assert abs(loss - math.log(256)) < 0.2


def test_single_token_vocab_has_zero_loss():
    m = Model.build(replace(tiny(), vocab_size=1), seed=0)
    loss = float(forward_loss(m, np.zeros((2, 9), dtype=np.int64)).data)
    assert loss == pytest.approx(0.0, abs=1e-7)


def test_out_of_range_token():
    m = Model.build(tiny(), seed=0)
    with pytest.raises(IndexError):
        forward_loss(m, np.full((1, 5), 256))
    with pytest.raises(IndexError):
        m.forward(np.array([[-1, 2]]))


def test_batched_loss_is_mean_of_per_sequence_losses():
    m = Model.build(tiny(), seed=1)
    rng = np.random.default_rng(1)
    batch = rng.integers(0, 256, (5, 17))
    batched = float(forward_loss(m, batch).data)
    singles = [float(forward_loss(m, batch[i:i + 1]).data) for i in range(5)]
    assert batched == pytest.approx(np.mean(singles), abs=1e-6)


def test_layer_norm_flag_changes_outputs():
    tokens = np.random.default_rng(2).integers(0, 256, (1, 12))
    a = Model.build(tiny("standard", ln=True), seed=5)
    b = Model.build(tiny("standard", ln=False), seed=5)
    for k in b.params:
        b.params[k].data = a.params[k].data.copy()
    la, lb = a.forward(tokens).data, b.forward(tokens).data
    assert not np.allclose(la, lb)
    np.testing.assert_array_equal(la, Model.build(tiny("standard", ln=True), seed=5).forward(tokens).data)


def test_forward_rejects_overlong_sequence():
    m = Model.build(tiny(), seed=0)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, 33), dtype=np.int64))


# -- perplexity ------------------------------------------------------------


def uniform_model():
    m = Model.build(tiny(), seed=0)
    m.params["tok_emb"].data[:] = 0.0  # tied head -> all logits zero
    return m


def test_uniform_model_perplexity_is_vocab():
    corpus = np.random.default_rng(3).integers(0, 256, 500)
    assert perplexity(uniform_model(), corpus) == pytest.approx(256.0, rel=0.02)


def test_random_init_perplexity_near_vocab():
    corpus = np.random.default_rng(3).integers(0, 256, 500)
    assert perplexity(Model.build(tiny(), seed=0), corpus) == pytest.approx(256.0, rel=0.02)


def oracle_ppl(model, tokens, stride):
    """Two plain loops: windows, then positions; one window per forward."""
    N = model.config.context
    T = len(tokens)
    scored = np.zeros(T, dtype=bool)  # scored[t]: target token t already counted
    total, count = 0.0, 0
    begin = 0
    while True:
        if begin + N > T - 1:
            begin = max(0, T - 1 - N)
        end = min(begin + N, T - 1)
        nll = model.token_nll(tokens[begin:end][None], tokens[begin + 1:end + 1][None])[0]
        for j in range(end - begin):
            t = begin + 1 + j
            if not scored[t]:
                scored[t] = True
                total += nll[j]
                count += 1
        if end >= T - 1:
            break
        begin += stride
    assert scored[1:].all()
    return math.exp(total / count)


@pytest.mark.parametrize("extra", [0, 1])
def test_half_stride_matches_two_loop_oracle(extra):
    m = Model.build(tiny(), seed=7)
    N = m.config.context
    tokens = np.random.default_rng(4).integers(0, 256, 3 * N + extra)
    got = perplexity(m, tokens, stride=N // 2, batch_size=3)
    assert got == pytest.approx(oracle_ppl(m, tokens, N // 2), rel=1e-6)


def test_full_stride_equals_disjoint_windows():
    m = Model.build(tiny(), seed=8)
    N = m.config.context
    tokens = np.random.default_rng(5).integers(0, 256, 4 * N + 1)
    total = 0.0
    for w in range(4):
        seg = tokens[w * N:(w + 1) * N + 1]
        total += m.token_nll(seg[:-1][None], seg[1:][None]).sum()
    disjoint = math.exp(total / (4 * N))
    assert perplexity(m, tokens, stride=N) == pytest.approx(disjoint, rel=1e-9)


def test_short_corpus_single_truncated_window():
    wins, length = stride_windows(10, 32, 16)
    assert wins == [(0, 0)] and length == 9
    m = Model.build(tiny(), seed=0)
    tokens = np.arange(10) % 256
    ppl, total, count = perplexity(m, tokens, return_nll=True)
    assert count == 9


def test_stride_windows_cover_every_target_once():
    for T in (40, 64, 65, 97, 200):
        for stride in (1, 7, 16, 32):
            wins, length = stride_windows(T, 32, stride)
            hits = np.zeros(T, dtype=int)
            for b, first in wins:
                hits[b + 1 + first:b + 1 + length] += 1
            assert hits[0] == 0 and np.all(hits[1:] == 1)


def test_stride_must_fit_context():
    with pytest.raises(ValueError):
        stride_windows(100, 32, 33)
    with pytest.raises(ValueError):
        stride_windows(100, 32, 0)


def test_training_step_reduces_loss():
    from sdlab.trainer import AdamWState, adamw_step

    m = Model.build(tiny(), seed=0)
    batch = np.random.default_rng(6).integers(0, 256, (4, 33))
    state = AdamWState()
    losses = []
    for _ in range(5):
        with ag.Tape() as tape:
            loss = forward_loss(m, batch)
        tape.backward(loss)
        losses.append(float(loss.data))
        adamw_step(m.params, state, 3e-3, weight_decay=0.0)
        for p in m.params.values():
            p.grad = None
    assert losses[-1] < losses[0]
