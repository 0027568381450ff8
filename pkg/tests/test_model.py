import numpy as np
import pytest

from distillforge import tensor as T
from distillforge.model import (
    LARGE,
    SMALL,
    DropoutPlan,
    Seq2SeqConfig,
    Seq2SeqParams,
    attention_weights,
    count_params,
    decode_step,
    encode,
    forward,
    init_params,
    initial_state,
    make_batch,
    param_shapes,
)
from distillforge.tensor import grad_check

from conftest import param_loss, tiny_config, toy_batch


def test_presets_match_appendix_values():
    assert (LARGE.bpe_merges, LARGE.embed_size, LARGE.hidden_size, LARGE.num_layers, LARGE.cell_type) == (10000, 256, 256, 1, "lstm")
    assert (SMALL.bpe_merges, SMALL.embed_size, SMALL.hidden_size, SMALL.num_layers, SMALL.cell_type) == (500, 256, 256, 1, "lstm")
    assert LARGE.rnn_dropout_inputs == LARGE.rnn_dropout_states == 0.1 and LARGE.embed_dropout == 0.0
    assert LARGE.max_seq_len == 100


def test_count_params_hand_example():
    # embed 1, hidden 2 (one unit per encoder direction), both vocabularies 5
    # embeddings 10, encoder 2 x 12, decoder 32, init 4, combination 10, output 15
    cfg = Seq2SeqConfig(bpe_merges=1, embed_size=1, hidden_size=2)
    assert count_params(cfg, 5, 5) == 95
    assert init_params(cfg, 5, 5).num_params() == 95


@pytest.mark.parametrize("cell,layers", [("lstm", 1), ("lstm", 2), ("gru", 1), ("gru", 2)])
def test_count_params_matches_tensors(cell, layers):
    cfg = Seq2SeqConfig(bpe_merges=50, embed_size=6, hidden_size=8, num_layers=layers, cell_type=cell)
    p = init_params(cfg, 11, 13)
    assert p.num_params() == count_params(cfg, 11, 13)
    assert {k: t.shape for k, t in p.tensors.items()} == param_shapes(cfg, 11, 13)


def test_vocab_change_touches_only_embeddings_and_output():
    a, b = param_shapes(LARGE, 100, 100), param_shapes(LARGE, 100, 200)
    changed = {k for k in a if a[k] != b[k]}
    assert changed == {"trg_embed", "out_W", "out_b"}
    assert count_params(LARGE, 100, 200) - count_params(LARGE, 100, 100) == 100 * (256 + 256 + 1)


def test_full_scale_counts():
    large = count_params(LARGE, 10004, 10004)
    small = count_params(SMALL, 504, 504)
    assert 9e6 * 0.85 <= large <= 9e6 * 1.15
    assert 1.4e6 * 0.85 <= small <= 1.4e6 * 1.15


def test_init_deterministic_and_bias_layout():
    cfg = tiny_config()
    a, b = init_params(cfg, 9, 8, seed=5), init_params(cfg, 9, 8, seed=5)
    for k in a.tensors:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    c = init_params(cfg, 9, 8, seed=6)
    assert not np.array_equal(a["out_W"].data, c["out_W"].data)
    h = cfg.hidden_size // 2
    np.testing.assert_array_equal(a["enc0_fwd_b"].data, np.r_[np.zeros(h), np.ones(h), np.zeros(2 * h)])
    W = a["comb_W"].data
    assert np.abs(W).max() <= np.sqrt(6 / sum(W.shape)) + 1e-7
    with pytest.raises(ValueError):
        init_params(cfg, 4, 8)


def test_save_load_roundtrip(tmp_path):
    p = init_params(tiny_config(cell_type="gru"), 9, 8, seed=1)
    p.save(tmp_path / "ck", {"seed": 1})
    q = Seq2SeqParams.load(tmp_path / "ck")
    assert q.config == p.config
    for k in p.tensors:
        np.testing.assert_array_equal(p[k].data, q[k].data)


def test_encode_errors_and_single_position():
    p = init_params(tiny_config(), 9, 8)
    with pytest.raises(ValueError):
        encode(p, np.zeros((1, 0), dtype=np.int64))
    enc = encode(p, np.array([[5]]))
    assert enc.states.shape == (1, 1, 4)
    w = attention_weights(p, np.ones((1, 4)), enc)
    assert w[0, 0] == 1.0


def test_encoder_direction_symmetry():
    """The backward half on x equals the forward half on reversed x once the two
    directions share weights."""
    p = init_params(tiny_config(), 9, 8, seed=2)
    arrays = p.arrays()
    for part in ("Wx", "Wh", "b"):
        arrays[f"enc0_bwd_{part}"] = arrays[f"enc0_fwd_{part}"]
    q = p.with_arrays(arrays)
    x = np.array([[4, 7, 5, 6]])
    h = 2
    fwd_rev = encode(q, x[:, ::-1].copy()).states.data[0, :, :h]
    bwd = encode(q, x).states.data[0, :, h:]
    np.testing.assert_allclose(bwd, fwd_rev[::-1], rtol=1e-6, atol=1e-7)


def test_padding_never_attended():
    p = init_params(tiny_config(), 9, 8, seed=3)
    batch = make_batch([([4, 5, 6], [4]), ([5], [4])])
    enc = encode(p, batch.src, batch.src_mask)
    w = attention_weights(p, np.random.default_rng(0).normal(size=(2, 4)), enc)
    assert (w[1, 1:] == 0).all()
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
    # padding must not change the unpadded sentence's outputs
    alone = forward(p, make_batch([([5], [4])])).data[0]
    np.testing.assert_allclose(forward(p, batch).data[1], alone, rtol=1e-5, atol=1e-6)


def _np_lstm(x, h, c, Wx, Wh, b):
    z = x @ Wx + h @ Wh + b
    n = h.shape[-1]
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:n]), sig(z[n:2 * n]), np.tanh(z[2 * n:3 * n]), sig(z[3 * n:])
    c = f * c + i * g
    return o * np.tanh(c), c


def test_decode_step_matches_hand_oracle(f64):
    cfg = Seq2SeqConfig(bpe_merges=1, embed_size=3, hidden_size=2, rnn_dropout_inputs=0, rnn_dropout_states=0)
    p = init_params(cfg, 6, 5, seed=11).astype("float64")
    arrays = {k: v * 2 for k, v in p.arrays().items()}
    p = p.with_arrays(arrays)
    a = arrays
    src = [4, 5, 4]
    E = a["src_embed"][src]
    hf, cf, fwd = np.zeros(1), np.zeros(1), []
    for t in range(3):
        hf, cf = _np_lstm(E[t], hf, cf, a["enc0_fwd_Wx"], a["enc0_fwd_Wh"], a["enc0_fwd_b"])
        fwd.append(hf)
    hb, cb, bwd = np.zeros(1), np.zeros(1), [None] * 3
    for t in (2, 1, 0):
        hb, cb = _np_lstm(E[t], hb, cb, a["enc0_bwd_Wx"], a["enc0_bwd_Wh"], a["enc0_bwd_b"])
        bwd[t] = hb
    S = np.array([np.r_[f, b] for f, b in zip(fwd, bwd)])
    h0 = np.tanh(bwd[0] @ a["init0_W"] + a["init0_b"])
    h1, _ = _np_lstm(a["trg_embed"][2], h0, np.zeros(2), a["dec0_Wx"], a["dec0_Wh"], a["dec0_b"])
    scores = S @ h1
    alpha = np.exp(scores - scores.max())
    alpha /= alpha.sum()
    ctx = alpha @ S
    comb = np.tanh(np.r_[h1, ctx] @ a["comb_W"] + a["comb_b"])
    logits = comb @ a["out_W"] + a["out_b"]
    expected = logits - np.log(np.exp(logits).sum())

    enc = encode(p, np.array([src]))
    logp, _ = decode_step(p, np.array([2]), initial_state(p, enc), enc)
    np.testing.assert_allclose(logp[0], expected, rtol=1e-10, atol=1e-12)
    assert abs(np.exp(logp).sum() - 1) < 1e-6


@pytest.mark.parametrize("cell", ["lstm", "gru"])
def test_decode_step_agrees_with_teacher_forcing(cell):
    p = init_params(tiny_config(cell_type=cell, num_layers=2), 9, 8, seed=4)
    batch = make_batch([([4, 5, 6], [5, 6, 7])])
    full = forward(p, batch).data[0]
    enc = encode(p, batch.src)
    state = initial_state(p, enc)
    for t, prev in enumerate(batch.trg_in[0]):
        logp, state = decode_step(p, np.array([prev]), state, enc)
        np.testing.assert_allclose(logp[0], full[t], rtol=1e-5, atol=1e-5)


# Two stacked layers give some gradient entries near 1e-8, where central
# differences at eps=1e-5 are dominated by round-off (the error shrinks
# monotonically as eps grows), so the deep case uses a larger step.
@pytest.mark.parametrize("cell,layers,eps", [("lstm", 1, 1e-5), ("gru", 1, 1e-5), ("lstm", 2, 1e-3), ("gru", 2, 1e-3)])
def test_full_model_gradient(f64, cell, layers, eps):
    p = init_params(tiny_config(cell_type=cell, num_layers=layers), 7, 6, seed=1).astype("float64")
    batch = toy_batch()
    worst = max(grad_check(param_loss(p, batch, name), p[name], eps=eps) for name in p.tensors)
    assert worst <= 1e-4


def test_dropout_masks_are_pure_functions_of_seed_step_layer():
    cfg = tiny_config(rnn_dropout_inputs=0.3, rnn_dropout_states=0.3)
    p = init_params(cfg, 7, 6, seed=1)
    batch = toy_batch()
    a = forward(p, batch, DropoutPlan(3, 10)).data
    b = forward(p, batch, DropoutPlan(3, 10)).data
    c = forward(p, batch, DropoutPlan(3, 11)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)
    np.testing.assert_array_equal(forward(p, batch).data, forward(p, batch).data)
