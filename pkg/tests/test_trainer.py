import math

import numpy as np
import pytest

from conftest import tiny_config
from unirank import autodiff as ad
from unirank.autodiff import Tensor
from unirank.distill import backward_distill_loss, forward_distill
from unirank.losses import LossWeights, total_loss
from unirank.optim import make_rng
from unirank.trainer import (
    NonFiniteLossError,
    TrainingConfig,
    build_batch,
    build_slate,
    fit,
    init_models,
    init_state,
    joint_forward,
    loss_components,
    mine_hard_negatives,
    run,
    sample_uniform_negatives,
    train_step,
    validate_config,
)
from unirank.tte import build_index, encode_queries
from unirank.world import generate_world


def params_bytes(models):
    return b"".join(p.data.tobytes() for m in models for p in m.parameters())


def test_every_positive_in_every_slate(micro_world):
    cfg = tiny_config(steps=15)

    state = init_state(micro_world, cfg)
    for _ in range(15):
        index = build_index(state.tte, micro_world)
        batch = build_batch(micro_world, cfg, state, index)
        for q, slate, pos in zip(batch.query_ids, batch.slates, batch.positives):
            assert set(pos) <= set(slate)
            assert slate.size == cfg.k and np.unique(slate).size == cfg.k
            assert np.array_equal(np.sort(pos), micro_world.relevant(int(q)))
        train_step(micro_world, state, batch, cfg)


def test_build_slate_forces_positives_and_keeps_score_order():
    rng = make_rng(0)
    for _ in range(200):
        n = int(rng.integers(5, 40))
        scores = rng.normal(size=n)
        pos = rng.choice(n, size=int(rng.integers(1, 4)), replace=False)
        k = int(rng.integers(pos.size + 1, n + 1))
        slate = build_slate(scores, pos, k)
        assert slate.size == k and set(pos) <= set(slate)
        assert np.all(np.diff(scores[slate]) <= 0)
        # non-positives kept are the best-scoring ones
        rest = np.setdiff1d(np.arange(n), pos)
        kept = np.setdiff1d(slate, pos)
        oracle = sorted(rest, key=lambda i: (-scores[i], i))[: kept.size]
        assert set(kept) == set(oracle)


def test_slate_of_whole_corpus(micro_world):
    cfg = tiny_config(k=micro_world.n_items)
    state = init_state(micro_world, cfg)
    batch = build_batch(micro_world, cfg, state, build_index(state.tte, micro_world))
    for slate in batch.slates:
        assert np.array_equal(np.sort(slate), np.arange(micro_world.n_items))


def test_uniform_negatives_replay_rng(micro_world):
    cfg = tiny_config(mining=False)
    state = init_state(micro_world, cfg)
    batch = build_batch(micro_world, cfg, state, build_index(state.tte, micro_world))
    # replay the documented draw order on a fresh generator
    rng = init_state(micro_world, cfg).rng
    qids = np.sort(rng.choice(np.arange(cfg.n_train_queries), size=cfg.batch_size, replace=False))
    assert np.array_equal(qids, batch.query_ids)
    for row, q in enumerate(qids):
        g = micro_world.grades(int(q))
        rp = rng.choice(np.flatnonzero(g > 0), size=cfg.positives_per_query, replace=True)
        neg = rng.choice(np.flatnonzero(g == 0), size=cfg.negatives, replace=False)
        assert np.array_equal(rp, batch.retrieval_pos[row])
        assert np.array_equal(neg, batch.negatives[row])
        assert np.all(g[batch.negatives[row]] == 0)


def test_hard_negatives_drawn_from_pool(micro_world):
    cfg = tiny_config(hard_fraction=1.0)
    state = init_state(micro_world, cfg)
    state.neg_pool = np.zeros((micro_world.n_queries, cfg.pool_size), dtype=np.int64)
    qids = np.arange(cfg.n_train_queries)
    state.neg_pool[qids] = mine_hard_negatives(micro_world, state.tte, cfg.pool_size, qids)
    batch = build_batch(micro_world, cfg, state, build_index(state.tte, micro_world))
    for q, neg in zip(batch.query_ids, batch.negatives):
        assert set(neg) <= set(state.neg_pool[q])


def test_sample_uniform_negatives_only_grade_zero():
    rng = make_rng(3)
    g = np.array([0, 2, 0, 1, 0, 0, 3])
    for _ in range(50):
        assert np.all(g[sample_uniform_negatives(rng, g, 3)] == 0)
    # more draws than irrelevant items falls back to replacement
    assert sample_uniform_negatives(rng, np.array([0, 1]), 4).tolist() == [0, 0, 0, 0]


def test_mine_hard_negatives_against_sort_oracle(micro_world):
    tte, _ = init_models(micro_world, tiny_config())
    qids = list(range(10))
    pool = mine_hard_negatives(micro_world, tte, 7, qids)
    e_q, _ = encode_queries(tte, micro_world, np.array(qids))
    emb = build_index(tte, micro_world).emb
    for row, q in enumerate(qids):
        g = micro_world.grades(q)
        s = emb @ e_q[row]
        oracle = sorted((i for i in range(micro_world.n_items) if g[i] == 0), key=lambda i: (-s[i], i))[:7]
        assert pool[row].tolist() == oracle


def test_pool_changes_after_training(micro_world):
    cfg = tiny_config(steps=30, lr=3e-2)
    state = init_state(micro_world, cfg)
    qids = list(range(cfg.n_train_queries))
    before = mine_hard_negatives(micro_world, state.tte, cfg.pool_size, qids)
    run(micro_world, cfg, state)
    after = mine_hard_negatives(micro_world, state.tte, cfg.pool_size, qids)
    assert not np.array_equal(before, after)


def test_zero_weights_leave_parameters_unchanged(micro_world):
    cfg = tiny_config(weights=LossWeights(0, 0, 0, 0, 0), steps=5)
    state = init_state(micro_world, cfg)
    before = params_bytes([state.tte, state.lt])
    run(micro_world, cfg, state)
    assert params_bytes([state.tte, state.lt]) == before
    assert all(r.total == 0.0 and r.grad_norm == 0.0 for r in state.log.records)


def test_step_bit_reproducible(micro_world):
    cfg = tiny_config(steps=12)
    a = fit(micro_world, cfg)
    b = fit(micro_world, cfg)
    assert params_bytes(a[:2]) == params_bytes(b[:2])
    assert [r.total for r in a[2].records] == [r.total for r in b[2].records]


def test_interrupted_run_resumes_identically(micro_world):
    cfg = tiny_config(steps=14, refresh_every=5)
    straight = run(micro_world, cfg, init_state(micro_world, cfg))
    split = run(micro_world, cfg, init_state(micro_world, cfg), until=7)
    run(micro_world, cfg, split)
    assert params_bytes([straight.tte, straight.lt]) == params_bytes([split.tte, split.lt])


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_on_small_world(seed):
    w = generate_world(seed, 50, 12, vocab_size=32)
    cfg = tiny_config(seed=seed, steps=100, n_train_queries=12, k=8, batch_size=4, mining=False)
    _, _, log = fit(w, cfg)
    totals = np.array([r.total for r in log.records])
    assert np.median(totals[-10:]) < totals[0]


def test_zero_steps_returns_initial_models(micro_world):
    cfg = tiny_config(steps=0)
    tte, lt, log = fit(micro_world, cfg)
    init = init_models(micro_world, cfg)
    assert params_bytes([tte, lt]) == params_bytes(init)
    assert log.records == []


def test_query_without_positives_skipped(micro_world, caplog):
    w = generate_world(21, 120, 24, vocab_size=32)
    w.grades(0)
    w._grade_cache[0] = np.zeros(w.n_items, dtype=np.int64)
    cfg = tiny_config()
    state = init_state(w, cfg)
    batch = build_batch(w, cfg, state, build_index(state.tte, w), query_ids=np.array([0, 1, 2]))
    assert batch.query_ids.tolist() == [1, 2]
    assert "no relevant items" in caplog.text


def test_validate_config(micro_world):
    with pytest.raises(ValueError):
        validate_config(micro_world, tiny_config(negatives=0))
    with pytest.raises(ValueError):
        validate_config(micro_world, tiny_config(hard_fraction=1.5))
    with pytest.raises(ValueError):
        validate_config(micro_world, tiny_config(k=micro_world.n_items + 1))
    with pytest.raises(ValueError, match="max relevant"):
        validate_config(micro_world, tiny_config(k=1))
    validate_config(micro_world, tiny_config(k=micro_world.n_items))


def test_unknown_training_key_rejected():
    with pytest.raises(KeyError):
        TrainingConfig.from_dict({"stpes": 3})
    assert TrainingConfig.from_dict(tiny_config().to_dict()) == tiny_config()


def test_non_finite_loss_raises(micro_world):
    cfg = tiny_config()
    state = init_state(micro_world, cfg)
    state.lt.params["head.w"].data[:] = np.inf
    batch = build_batch(micro_world, cfg, state, build_index(state.tte, micro_world))
    with pytest.raises(NonFiniteLossError) as err:
        train_step(micro_world, state, batch, cfg)
    assert err.value.step == 0


def test_disabled_terms_log_zero(micro_world):
    cfg = tiny_config(disable_forward=True, disable_align=True, steps=3)
    _, _, log = fit(micro_world, cfg)
    assert all(r.forward == 0.0 and r.align == 0.0 and r.backward > 0 for r in log.records)


def full_loss_fn(w, state, batch, cfg):
    """Total loss as a function of every trainable array, for gradient checking.

    The distillation terms stop gradients through their teacher side, so the
    teacher scores are frozen at the base point; the finite differences then
    see exactly the surrogate the optimizer differentiates.
    """
    weights = cfg.effective_weights()
    slots = [(m, n) for m in (state.tte, state.lt) for n in m.params]
    with ad.no_grad():
        base = joint_forward(w, state.tte, state.lt, batch, cfg.pe_on)
    lt_teacher, tte_teacher = Tensor(base.s_lt.data), Tensor(base.s_tte.data)

    def f(*leaves):
        saved = [dict(m.params) for m in (state.tte, state.lt)]
        for (m, n), leaf in zip(slots, leaves):
            m.params[n] = leaf
        try:
            fw = joint_forward(w, state.tte, state.lt, batch, cfg.pe_on)
            comps = loss_components(fw, batch, weights, state.lt.params["align.W"])
            comps[2] = forward_distill(lt_teacher, fw.s_tte, weights.tau_distill)
            comps[3] = backward_distill_loss(tte_teacher, fw.s_lt)
            return total_loss(comps, weights)
        finally:
            state.tte.params, state.lt.params = saved

    return f, [m.params[n].data for m, n in slots]


def test_full_loss_gradients():
    w = generate_world(4, 40, 4, vocab_size=32)
    cfg = tiny_config(k=5, batch_size=1, positives_per_query=1, negatives=2, n_train_queries=4)
    state = init_state(w, cfg)
    batch = build_batch(w, cfg, state, build_index(state.tte, w))
    f, point = full_loss_fn(w, state, batch, cfg)
    assert ad.grad_check(f, point) < 1e-3
