import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unirank import autodiff as ad
from unirank.autodiff import Tensor
from unirank.listwise import (
    CandidateSlate,
    LTConfig,
    LTModel,
    assemble_inputs,
    lt_forward,
    lt_forward_full,
    lt_forward_tensor,
    positional_encoding,
)
from unirank.optim import make_rng

SMALL = LTConfig(d=4, d_r=2, d_model=8, n_heads=2, n_layers=2, d_ff=6)


def random_slate(rng, k, cfg=LTConfig(), ids=None):
    return CandidateSlate(
        query_id=0,
        item_ids=np.arange(k) if ids is None else ids,
        tte_scores=rng.uniform(-1, 1, k),
        e_q=rng.normal(size=cfg.d),
        r_q=rng.normal(size=cfg.d_r),
        e_items=rng.normal(size=(k, cfg.d)),
        r_items=rng.normal(size=(k, cfg.d_r)),
    )


def reference_forward(model, x, positional=False):
    """Plain numpy transformer over one slate, head by head."""
    cfg, p = model.cfg, {n: t.data for n, t in model.params.items()}
    k = x.shape[0]
    if positional:
        x = x + positional_encoding(k, cfg.d_in)

    def ln(a, g, b):
        mu = a.mean(-1, keepdims=True)
        var = ((a - mu) ** 2).mean(-1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * g + b

    z = x @ p["in.w"] + p["in.b"]
    dh = cfg.d_model // cfg.n_heads
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        u = ln(z, p[pre + "ln1.g"], p[pre + "ln1.b"])
        out = np.zeros_like(z)
        for h in range(cfg.n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            q, kk, v = ((u @ p[pre + m])[:, sl] for m in ("wq", "wk", "wv"))
            logits = q @ kk.T / np.sqrt(dh)
            a = np.exp(logits - logits.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[:, sl] = a @ v
        z = z + out @ p[pre + "wo"]
        u = ln(z, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = z + np.tanh(u @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    return z @ p["head.w"] + p["head.b"]


def test_d_model_must_divide_heads():
    with pytest.raises(ValueError):
        LTConfig(d_model=10, n_heads=4)


def test_assemble_inputs_layout():
    rng = make_rng(0)
    slate = random_slate(rng, 5)
    x = assemble_inputs(slate)
    cfg = LTConfig()
    assert x.shape == (5, 2 * cfg.d + 2 * cfg.d_r + 1)
    assert np.all(x[:, : cfg.d] == slate.e_q)
    j = 3
    manual = np.concatenate([slate.e_q, slate.e_items[j], slate.r_q, slate.r_items[j], [slate.tte_scores[j]]])
    assert np.array_equal(x[j], manual)
    assert np.array_equal(x[:, -1], slate.tte_scores)


def test_assemble_requires_embeddings():
    slate = CandidateSlate(0, [1, 2], [0.1, 0.2])
    with pytest.raises(ValueError):
        assemble_inputs(slate)


def test_slate_invariants():
    with pytest.raises(ValueError):
        CandidateSlate(0, [], [])
    with pytest.raises(ValueError):
        CandidateSlate(0, [1, 1], [0.0, 0.0])


@pytest.mark.parametrize("positional", [False, True])
def test_forward_matches_reference(positional):
    rng = make_rng(1)
    model = LTModel(LTConfig(), make_rng(2))
    for k in (1, 3, 17):
        slate = random_slate(rng, k)
        got = lt_forward(model, slate, positional)
        np.testing.assert_allclose(got, reference_forward(model, assemble_inputs(slate), positional), atol=1e-10)


def test_single_candidate_attention_is_one():
    model = LTModel(LTConfig(), make_rng(3))
    out = lt_forward_full(model, random_slate(make_rng(4), 1))
    for att in out.attention:
        assert np.all(att == 1.0)


def test_attention_rows_are_distributions():
    model = LTModel(LTConfig(), make_rng(3))
    out = lt_forward_full(model, random_slate(make_rng(5), 30))
    for att in out.attention:
        np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-9)
        assert np.all((att > 0) & (att < 1))


def test_zeroed_model_gives_constant():
    model = LTModel(LTConfig(), make_rng(6))
    for name, t in model.params.items():
        t.data = np.zeros_like(t.data)
    model.params["head.b"].data = np.array(0.7)
    scores = lt_forward(model, random_slate(make_rng(7), 9))
    assert np.all(scores == 0.7)


def test_empty_and_wrong_width_rejected():
    model = LTModel(SMALL, make_rng(0))
    with pytest.raises(ValueError):
        lt_forward_tensor(model, Tensor(np.zeros((1, 0, SMALL.d_in))))
    with pytest.raises(ad.ShapeError):
        lt_forward_tensor(model, Tensor(np.zeros((1, 3, SMALL.d_in + 1))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(k, seed):
    rng = make_rng(seed)
    model = LTModel(LTConfig(), make_rng(seed, 1))
    slate = random_slate(rng, k)
    perm = rng.permutation(k)
    base = lt_forward(model, slate)
    np.testing.assert_allclose(lt_forward(model, slate.permuted(perm)), base[perm], atol=1e-9)


def test_positional_encoding_breaks_symmetry():
    rng = make_rng(8)
    model = LTModel(LTConfig(), make_rng(9))
    slate = random_slate(rng, 6)
    perm = np.array([1, 0, 2, 3, 4, 5])
    base = lt_forward(model, slate, True)
    assert not np.allclose(lt_forward(model, slate.permuted(perm), True), base[perm], atol=1e-9)


def test_item_id_relabeling_invariance():
    rng = make_rng(10)
    model = LTModel(LTConfig(), make_rng(11))
    slate = random_slate(rng, 5)
    relabeled = CandidateSlate(0, np.array([90, 14, 3, 77, 8]), slate.tte_scores, slate.e_q, slate.r_q,
                               slate.e_items, slate.r_items)
    assert np.array_equal(lt_forward(model, slate), lt_forward(model, relabeled))


def test_gradients_wrt_all_parameters():
    rng = make_rng(12)
    model = LTModel(SMALL, make_rng(13))
    x = Tensor(rng.normal(size=(2, 4, SMALL.d_in)))
    names = list(model.params)
    weights = Tensor(rng.normal(size=(2, 4)))
    orig = dict(model.params)

    def f(*arrays):
        model.params = dict(zip(names, arrays))
        out = lt_forward_tensor(model, x)
        return ad.tsum(out.scores * weights) + ad.tsum(ad.square(out.z)) * 0.01

    try:
        assert ad.grad_check(f, [orig[n].data for n in names]) < 1e-3
    finally:
        model.params = orig


def test_positional_table():
    pe = positional_encoding(4, 6)
    assert pe.shape == (4, 6)
    assert np.all(pe[0, 0::2] == 0.0) and np.all(pe[0, 1::2] == 1.0)
    assert pe[2, 2] == pytest.approx(np.sin(2 / 10000 ** (2 / 6)))
