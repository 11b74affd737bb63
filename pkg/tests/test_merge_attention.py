import math

import numpy as np
import pytest
import torch

from tagfex.merge_attention import (AttentionRecord, MergeAttention, expand_merge_classifier,
                                    load_attention_record, mcls_loss, merge_forward,
                                    merge_logits, record_attention, save_attention_record,
                                    tokenize, untokenize)
from tagfex.model_core import ExpandableClassifier

from oracles import attention_loop, central_difference, rel_err


def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _randomize(block, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype))
    return block


# ---------------------------------------------------------------- tokens

def test_tokenize_order_and_roundtrip():
    fmap = torch.arange(2 * 2 * 2 * 3, dtype=torch.float32).view(2, 2, 2, 3)
    tokens = tokenize(fmap)
    assert tokens.shape == (2, 4, 3)
    assert torch.equal(tokens[0, 1], fmap[0, 0, 1]) and torch.equal(tokens[0, 2], fmap[0, 1, 0])
    assert torch.equal(untokenize(tokens, 2, 2), fmap)
    single = torch.rand(1, 1, 1, 5)
    assert torch.equal(tokenize(single)[0, 0], single[0, 0, 0])


# ---------------------------------------------------------------- attention values

def test_equal_logits_average_values():
    block = MergeAttention(2, 1).double()
    with torch.no_grad():
        block.q.weight.zero_()              # all logits 0
    ts = torch.tensor([[[1.0, -1.0]]], dtype=torch.float64)
    ta = torch.tensor([[[-2.0, 3.0]]], dtype=torch.float64)
    out, attn = block(ts, ta)
    v_ts = block.v_ts(block.norm_ts(ts))
    v_ta = block.v_ta(block.norm_ta(ta))
    assert torch.allclose(out, (v_ts + v_ta) / 2, atol=1e-12)
    assert torch.allclose(attn, torch.full((1, 1, 2), 0.5, dtype=torch.float64))


def test_output_in_convex_hull_of_values():
    block = _randomize(MergeAttention(4, 2).double(), 0)
    with torch.no_grad():
        block.v_ta.weight.copy_(block.v_ts.weight)
        block.norm_ta.load_state_dict(block.norm_ts.state_dict())
    ts = torch.randn(1, 3, 4, dtype=torch.float64)
    ta = ts.clone()
    out, _ = block(ts, ta)
    values = block.v_ts(block.norm_ts(ts))[0]          # (N, d): per-dim bounds
    lo, hi = values.min(0).values, values.max(0).values
    assert torch.all(out[0] >= lo - 1e-9) and torch.all(out[0] <= hi + 1e-9)


@pytest.mark.parametrize("heads", [1, 2])
def test_matches_loop_oracle(heads):
    block = _randomize(MergeAttention(4, heads).double(), heads)
    ts = torch.randint(-2, 3, (1, 2, 4)).double()
    ta = torch.randint(-2, 3, (1, 2, 4)).double()
    out, attn = block(ts, ta)
    p = {k: v.detach().numpy() for k, v in block.state_dict().items()}
    z_ts = _layer_norm(ts[0].numpy(), p["norm_ts.weight"], p["norm_ts.bias"])
    z_ta = _layer_norm(ta[0].numpy(), p["norm_ta.weight"], p["norm_ta.bias"])
    want_out, want_attn = attention_loop(z_ts, z_ta, p["q.weight"], p["k_ts.weight"],
                                         p["v_ts.weight"], p["k_ta.weight"], p["v_ta.weight"],
                                         heads)
    assert rel_err(out[0], want_out) < 1e-6
    assert rel_err(attn[0], want_attn) < 1e-6


def test_rows_sum_to_one_and_shapes():
    block = MergeAttention(8, 4, ta_dim=6)
    out, attn = block(torch.randn(3, 5, 8), torch.randn(3, 7, 6))
    assert out.shape == (3, 5, 8) and attn.shape == (3, 5, 12)
    assert torch.allclose(attn.sum(-1), torch.ones(3, 5), atol=1e-6)


def test_ta_input_receives_no_gradient():
    block = MergeAttention(4, 2)
    fmap_ts = torch.randn(2, 2, 2, 4, requires_grad=True)
    fmap_ta = torch.randn(2, 2, 2, 4, requires_grad=True)
    out, attn = merge_forward(fmap_ts, fmap_ta, block)
    (out.sum() + attn.pow(2).sum()).backward()
    assert fmap_ta.grad is None
    assert fmap_ts.grad is not None and fmap_ts.grad.abs().sum() > 0


@pytest.mark.parametrize("heads", [1, 2])
def test_gradients_match_finite_differences(heads):
    torch.manual_seed(heads)
    block = _randomize(MergeAttention(4, heads).double(), 10 + heads)
    fmap_ts = torch.randn(1, 2, 2, 4, dtype=torch.float64, requires_grad=True)
    fmap_ta = torch.randn(1, 2, 2, 4, dtype=torch.float64)
    r_out = torch.randn(1, 4, 4, dtype=torch.float64)
    r_att = torch.randn(1, 4, 8, dtype=torch.float64)

    def fn():
        out, attn = merge_forward(fmap_ts, fmap_ta, block)
        return (out * r_out).sum() + (attn * r_att).sum()

    fn().backward()
    params = [fmap_ts] + list(block.parameters())
    numeric = central_difference(fn, params)
    for p, g in zip(params, numeric):
        assert rel_err(p.grad, g) < 1e-3


def test_bad_shapes_rejected():
    block = MergeAttention(4, 2)
    with pytest.raises(ValueError):
        block(torch.randn(1, 2, 4), torch.randn(2, 2, 4))
    with pytest.raises(ValueError):
        block(torch.randn(1, 2, 3), torch.randn(1, 2, 4))
    with pytest.raises(ValueError):
        MergeAttention(6, 4)


# ---------------------------------------------------------------- merge classifier

def test_gap_is_identity_for_one_token():
    clf = ExpandableClassifier(3, 2)
    with torch.no_grad():
        clf.weight.normal_()
    merged = torch.randn(4, 1, 3)
    assert torch.equal(merge_logits(merged, clf), clf(merged[:, 0]))


def test_uniform_logits_give_log_k():
    assert mcls_loss(torch.zeros(5, 7), torch.arange(5)).item() == pytest.approx(math.log(7))


def test_mcls_matches_softmax_ce(rng):
    logits = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    lse = np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1)) + logits.max(1)
    want = float(np.mean(lse - logits[np.arange(6), y]))
    got = mcls_loss(torch.from_numpy(logits), torch.from_numpy(y)).item()
    assert got == pytest.approx(want, rel=1e-6)
    with pytest.raises(ValueError):
        mcls_loss(torch.from_numpy(logits), torch.tensor([0, 1, 2, 3, 4, 0]))


def test_merge_classifier_grows_outputs_only():
    first = expand_merge_classifier(None, 2, 8)
    second = expand_merge_classifier(first, 3, 8)
    assert second.weight.shape == (5, 8)


# ---------------------------------------------------------------- records

def test_record_single_sample_and_masses():
    maps = torch.softmax(torch.randn(1, 3, 6), -1)
    rec = record_attention(maps, task=1, epoch=4)
    assert np.allclose(rec.matrix, maps[0].numpy())
    assert np.allclose(rec.matrix.sum(1), 1)
    assert 0 <= rec.ta_mass() <= 1
    assert rec.ta_mass() + rec.ts_mass() == pytest.approx(1.0)
    assert np.array_equal(rec.display_matrix()[:, :3], rec.matrix[:, 3:])


def test_record_file_roundtrip(tmp_path):
    rec = AttentionRecord(2, 7, np.random.default_rng(0).dirichlet(np.ones(8), size=4))
    path = save_attention_record(rec, tmp_path)
    assert path.name == "attn_t2_e7.txt"
    back = load_attention_record(path)
    assert (back.task, back.epoch) == (2, 7)
    assert np.array_equal(back.matrix, rec.matrix)
