import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unirank import autodiff as ad
from unirank.autodiff import ShapeError, Tensor
from unirank.distill import (
    RankDistribution,
    alignment_loss,
    backward_distill_loss,
    forward_distill,
    forward_distill_loss,
    to_distribution,
)
from unirank.losses import LossWeights, approx_ndcg_loss, retrieve_loss, soft_ranks, total_loss
from unirank.metrics import dcg
from unirank.optim import make_rng

scores_st = arrays(np.float64, st.integers(2, 10), elements=st.floats(-4, 4))


# ---------------------------------------------------------------------------
# distributions and KL


def test_to_distribution_examples():
    np.testing.assert_allclose(to_distribution([3.0, 3.0, 3.0], 1.0).probs, 1 / 3, atol=1e-15)
    p = to_distribution([2.0, 1.0], 1.0).probs
    np.testing.assert_allclose(p, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-15)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)
    flat = to_distribution(make_rng(0).normal(size=6), 1e6).probs
    assert np.max(np.abs(flat - 1 / 6)) < 1e-5
    with pytest.raises(ValueError):
        to_distribution([1.0], 0.0)


@given(scores_st, st.floats(0.05, 20))
def test_distribution_invariants(s, tau):
    p = to_distribution(s, tau).probs
    assert np.all(p > 0) and abs(p.sum() - 1) < 1e-9


def test_kl_examples():
    p = RankDistribution(np.array([0.9, 0.1]), 1.0)
    q = RankDistribution(np.array([0.5, 0.5]), 1.0)
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert forward_distill_loss(p, q) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.3681, abs=1e-4)
    assert forward_distill_loss(p, p) == 0.0
    with pytest.raises(ValueError):
        forward_distill_loss(p, RankDistribution(q.probs, 2.0))


def kl_loop(p, q):
    return sum(p[i] * (math.log(p[i]) - math.log(q[i])) for i in range(len(p)))


def test_kl_loop_oracle_and_pinsker():
    rng = make_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        p = to_distribution(rng.normal(scale=2, size=n), 1.0)
        q = to_distribution(rng.normal(scale=2, size=n), 1.0)
        kl = forward_distill_loss(p, q)
        assert abs(kl - kl_loop(p.probs, q.probs)) < 1e-12
        assert kl >= 0.5 * np.abs(p.probs - q.probs).sum() ** 2 - 1e-12


@given(scores_st)
def test_kl_zero_iff_equal(s):
    p = to_distribution(s, 1.0)
    assert abs(forward_distill_loss(p, p)) < 1e-12
    q = to_distribution(s + np.linspace(0, 1, s.size), 1.0)
    assert forward_distill_loss(p, q) > 0 or np.allclose(p.probs, q.probs, atol=1e-9)


def test_forward_distill_tensor_matches_scalar_and_detaches_teacher():
    rng = make_rng(2)
    s_lt, s_tte = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    loss = forward_distill(s_lt, s_tte, 1.0)
    manual = np.mean([forward_distill_loss(to_distribution(a, 1.0), to_distribution(b, 1.0)) for a, b in zip(s_lt, s_tte)])
    assert loss.item() == pytest.approx(manual, abs=1e-12)
    t_lt = Tensor(s_lt, requires_grad=True)
    t_tte = Tensor(s_tte, requires_grad=True)
    g_lt, g_tte = ad.backward(forward_distill(t_lt, t_tte, 1.0), [t_lt, t_tte])
    assert np.all(g_lt == 0.0)
    assert np.any(g_tte != 0.0)
    # the student-side gradient is exact
    assert ad.grad_check(lambda t: forward_distill(s_lt, t, 0.7), s_tte) < 1e-6
    # teacher perturbation changes the value
    assert forward_distill(s_lt + 0.3 * rng.normal(size=(3, 5)), s_tte, 1.0).item() != pytest.approx(loss.item())


# ---------------------------------------------------------------------------
# backward distillation and alignment


def test_backward_distill_examples():
    assert backward_distill_loss([1.0, 0.0], [0.0, 0.0]).item() == 0.5
    assert backward_distill_loss([0.3, -1.0], [0.3, -1.0]).item() == 0.0
    rng = make_rng(3)
    a, b = rng.normal(size=9), rng.normal(size=9)
    loop = sum((a[i] - b[i]) ** 2 for i in range(9)) / 9
    assert abs(backward_distill_loss(a, b).item() - loop) < 1e-12
    with pytest.raises(ShapeError):
        backward_distill_loss(np.zeros(3), np.zeros(4))


def test_backward_distill_detaches_tte():
    rng = make_rng(4)
    t_tte = Tensor(rng.normal(size=5), requires_grad=True)
    t_lt = Tensor(rng.normal(size=5), requires_grad=True)
    g_tte, g_lt = ad.backward(backward_distill_loss(t_tte, t_lt), [t_tte, t_lt])
    assert np.all(g_tte == 0.0)
    np.testing.assert_allclose(g_lt, 2 * (t_lt.data - t_tte.data) / 5, atol=1e-15)


def test_alignment_examples_and_normal_equations():
    assert alignment_loss(np.zeros((3, 4)), np.zeros((3, 6)), np.ones((4, 6))).item() == 0.0
    z = make_rng(5).normal(size=(5, 4))
    assert alignment_loss(z, z, np.eye(4)).item() == 0.0
    rng = make_rng(6)
    k, d, dm = 20, 3, 5
    e, zz = rng.normal(size=(k, d)), rng.normal(size=(k, dm))
    # least-squares W: minimise ||e - z W^T||, solved via normal equations
    w_t = np.linalg.solve(zz.T @ zz, zz.T @ e)
    resid = e - zz @ w_t
    expected = float((resid**2).sum() / k)
    assert abs(alignment_loss(e, zz, w_t.T).item() - expected) < 1e-8
    with pytest.raises(ShapeError):
        alignment_loss(e, zz, np.ones((dm, d)))


def test_alignment_gradients_reach_all_inputs():
    rng = make_rng(7)
    e, z, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    assert ad.grad_check(lambda a, b, c: alignment_loss(a, b, c), [e, z, w]) < 1e-6


# ---------------------------------------------------------------------------
# retrieval and ranking losses


def test_retrieve_loss_examples():
    assert retrieve_loss(np.array(0.3), np.zeros((0,))).item() == 0.0
    assert retrieve_loss(np.array(1.0), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    v = retrieve_loss(np.array(2.0), np.array([0.0, 0.0]), 1.0).item()
    assert v == pytest.approx(-math.log(math.e**2 / (math.e**2 + 2)), abs=1e-14)
    assert v == pytest.approx(0.2395, abs=1e-4)


@settings(max_examples=100)
@given(st.floats(-3, 3), st.floats(0.01, 2), arrays(np.float64, st.integers(1, 8), elements=st.floats(-3, 3)),
       st.floats(0.1, 5))
def test_retrieve_loss_decreases_in_positive(s, ds, negs, tau):
    a = retrieve_loss(np.array(s), negs, tau).item()
    b = retrieve_loss(np.array(s + ds), negs, tau).item()
    assert b < a or (a < 1e-12)


def test_retrieve_loss_grad():
    rng = make_rng(8)
    assert ad.grad_check(lambda p, n: retrieve_loss(p, n, 0.5), [rng.normal(size=3), rng.normal(size=(3, 4))]) < 1e-6


def hard_ndcg(scores, grades):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return dcg([grades[j] for j in order]) / dcg(sorted(grades, reverse=True))


def test_approx_ndcg_limits():
    grades = np.array([3, 2, 0, 1, 0])
    perfect = np.array([5.0, 4.0, 1.0, 2.0, 0.0])
    assert approx_ndcg_loss(perfect, grades, 1e-3).item() < 1e-3
    rng = make_rng(9)
    for _ in range(50):
        k = int(rng.integers(2, 12))
        g = rng.integers(0, 4, size=k)
        if g.max() == 0:
            continue
        s = rng.normal(size=k)
        assert abs(approx_ndcg_loss(s, g, 1e-3).item() - (1 - hard_ndcg(s, g))) < 1e-2
    assert approx_ndcg_loss(rng.normal(size=4), np.zeros(4)).item() == 0.0


def test_approx_ndcg_equal_grades_near_zero():
    rng = make_rng(10)
    s = rng.normal(size=6) * 5
    # any order is ideal, so the surrogate is close to zero once soft ranks are near-discrete
    assert abs(approx_ndcg_loss(s, np.full(6, 2), 1e-3).item()) < 1e-3


def test_approx_ndcg_gradients():
    rng = make_rng(11)
    for t in (0.1, 1.0, 3.0):
        g = np.array([[3, 0, 1, 2, 0], [0, 0, 1, 0, 2]])
        assert ad.grad_check(lambda s: approx_ndcg_loss(s, g, t), rng.normal(size=(2, 5))) < 1e-3


@given(arrays(np.float64, st.integers(1, 15), elements=st.floats(-5, 5), unique=True), st.floats(0.05, 5))
def test_soft_rank_sum(s, t):
    k = s.size
    assert abs(soft_ranks(s, t).data.sum() - k * (k + 1) / 2) < 1e-6


def test_total_loss_examples():
    comps = [0.1, 0.2, 0.3, 0.4, 0.5]
    assert total_loss(comps, LossWeights(1, 2, 3, 4, 5)) == pytest.approx(5.5, abs=1e-12)
    assert total_loss(comps, LossWeights(1, 0, 0, 0, 0)) == 0.1
    assert total_loss([0.0] * 5, LossWeights()) == 0.0


@given(arrays(np.float64, 5, elements=st.floats(0, 10)), arrays(np.float64, 5, elements=st.floats(0, 10)),
       st.floats(0, 5))
def test_total_loss_linear(a, b, c):
    w = LossWeights(1.0, 2.0, 0.5, 0.25, 3.0)
    assert total_loss(list(a + b), w) == pytest.approx(total_loss(list(a), w) + total_loss(list(b), w), abs=1e-9)
    assert total_loss(list(c * a), w) == pytest.approx(c * total_loss(list(a), w), abs=1e-9)


def test_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(retrieve=-1.0)
    with pytest.raises(ValueError):
        LossWeights(tau_retrieve=0.0)
