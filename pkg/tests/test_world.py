import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unirank.metrics import dcg
from unirank.optim import make_rng
from unirank.world import (
    design_marginal,
    generate_world,
    grade_histogram,
    grade_thresholds,
    ideal_ranking,
    load_world,
    performance_gap,
    relevance,
    world_from_json,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(3, 500, 40)


def test_same_seed_identical(world):
    again = generate_world(3, 500, 40)
    assert np.array_equal(again.item_latents, world.item_latents)
    assert np.array_equal(again.query_latents, world.query_latents)
    assert all(np.array_equal(a, b) for a, b in zip(again.item_tokens, world.item_tokens))
    assert np.array_equal(again.grades(5), world.grades(5))
    other = generate_world(4, 500, 40)
    assert not np.array_equal(other.item_latents, world.item_latents)


def test_counts_and_ids():
    w = generate_world(0, 100, 7)
    assert len(w.items) == 100
    assert sorted(it.id for it in w.items) == list(range(100))
    assert len(w.queries) == 7


def test_tokens_in_vocab_and_lengths(world):
    for it in world.items:
        assert 4 <= it.tokens.size <= 32
        assert it.tokens.min() >= 0 and it.tokens.max() < world.vocab_size
    for q in world.queries:
        assert 4 <= q.tokens.size <= 16
        assert q.tokens.max() < world.vocab_size


def test_latents_unit_norm(world):
    np.testing.assert_allclose(np.linalg.norm(world.item_latents, axis=1), 1.0, atol=1e-12)


def test_relevance_is_pure(world):
    g1 = [relevance(world, 3, i) for i in range(0, 500, 7)]
    world._grade_cache.clear()
    g2 = [relevance(world, 3, i) for i in range(0, 500, 7)]
    assert g1 == g2


def test_every_query_has_a_relevant_item(world):
    for q in range(world.n_queries):
        assert world.relevant(q).size >= 1


def test_unknown_ids_rejected(world):
    with pytest.raises(KeyError):
        relevance(world, 40, 0)
    with pytest.raises(KeyError):
        relevance(world, 0, 500)


def test_invalid_arguments_rejected():
    with pytest.raises(ValueError):
        generate_world(0, 10, 2, vocab_size=8)
    with pytest.raises(ValueError):
        generate_world(0, 0, 2)


def test_planted_pairs():
    w = generate_world(1, 200, 5, planted=[(2, 17, "equal"), (2, 18, "orthogonal")])
    np.testing.assert_allclose(w.item_latents[17], w.query_latents[2])
    assert abs(w.item_latents[18] @ w.query_latents[2]) < 1e-12
    assert relevance(w, 2, 17) == w.grade_levels - 1
    assert relevance(w, 2, 18) == 0


def test_thresholds_hit_design_marginal_exactly():
    # the quantisation cut points are quantiles of the noisy-dot marginal;
    # Monte Carlo over the same generative law recovers the design probabilities
    rng = make_rng(9)
    dim, noise, probs = 8, 0.05, (0.0055, 0.003, 0.0015)
    th = grade_thresholds(dim, noise, probs)
    u = rng.standard_normal((400_000, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = u[:, 0] + noise * rng.standard_normal(u.shape[0])
    hist = np.bincount(np.searchsorted(th, v, side="right"), minlength=4) / v.size
    target = np.array([1 - sum(probs), *probs])
    se = np.sqrt(target * (1 - target) / v.size)
    assert np.all(np.abs(hist - target) < 5 * se)


def test_grade_histogram_exhaustive_matches_design():
    w = generate_world(11, 500, 200)
    hist = grade_histogram(w)
    recount = np.zeros(w.grade_levels, dtype=np.int64)
    for q in range(w.n_queries):
        for i in range(w.n_items):
            recount[relevance(w, q, i)] += 1
    assert np.array_equal(hist, recount)
    frac = hist / hist.sum()
    assert np.all(np.abs(frac - design_marginal(w)) < 0.02)


def test_mean_grade_monte_carlo(world):
    rng = make_rng(12)
    qs, its = rng.integers(0, world.n_queries, 1000), rng.integers(0, world.n_items, 1000)
    mean = np.mean([relevance(world, int(q), int(i)) for q, i in zip(qs, its)])
    design = float(np.dot(np.arange(world.grade_levels), design_marginal(world)))
    assert abs(mean - design) < 0.1


def test_ideal_ranking_against_sort_oracle():
    w = generate_world(5, 200, 10)
    for q in range(w.n_queries):
        g = w.grades(q)
        oracle = sorted(range(w.n_items), key=lambda i: (-g[i], i))
        assert list(ideal_ranking(w, q)) == oracle


def test_ideal_ranking_tie_rule():
    w = generate_world(5, 50, 2)
    r = ideal_ranking(w, 0)
    g = w.grades(0)
    zeros = r[g[r] == 0]
    assert np.all(np.diff(zeros) > 0)


def test_json_roundtrip(tmp_path, world):
    path = tmp_path / "w.json"
    world.save(path)
    spec = json.loads(path.read_text())
    assert spec["format_version"] == 1 and spec["kind"] == "world"
    back = load_world(path)
    assert np.array_equal(back.item_latents, world.item_latents)
    assert back.to_json() == world.to_json()
    with pytest.raises(ValueError):
        world_from_json({**spec, "format_version": 99})


# ---------------------------------------------------------------------------
# performance gap


def test_gap_trivial_cases(world):
    q = 0
    rel = world.relevant(q)
    assert performance_gap(world, q, rel).gap == 0.0
    assert performance_gap(world, q, np.arange(world.n_items)).gap == 0.0
    empty = performance_gap(world, q, [], metric="dcg")
    assert empty.gap == pytest.approx(dcg(np.sort(world.grades(q))[::-1]))
    assert performance_gap(world, q, []).gap == pytest.approx(1.0)


def test_gap_below_bound_random_subsets(world):
    rng = make_rng(13)
    for _ in range(100):
        q = int(rng.integers(world.n_queries))
        subset = rng.choice(world.n_items, size=int(rng.integers(0, world.n_items)), replace=False)
        rel = world.relevant(q)
        # mix in some relevant items so the bound is exercised away from the extremes
        subset = np.union1d(subset, rng.choice(rel, size=rng.integers(0, rel.size + 1), replace=False))
        for cutoff in (None, 10):
            r = performance_gap(world, q, subset, cutoff=cutoff)
            assert 0.0 <= r.gap <= r.bound + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 39), st.lists(st.integers(0, 499), max_size=60), st.lists(st.integers(0, 499), max_size=20))
def test_gap_monotone_in_retrieved_set(q, base, extra):
    w = generate_world(3, 500, 40)
    rel = w.relevant(q)
    small = np.union1d(base, rel[: len(rel) // 2])
    big = np.union1d(small, extra)
    assert performance_gap(w, q, big).gap <= performance_gap(w, q, small).gap + 1e-12


def test_gap_unknown_metric(world):
    with pytest.raises(ValueError):
        performance_gap(world, 0, [], metric="map")


def test_noise_makes_grades_imperfectly_predictable(world):
    # grade order is not the clean latent dot order: some pair is inverted
    q = 0
    g = world.grades(q)
    clean = world.item_latents @ world.query_latents[q]
    inverted = any(g[a] > g[b] and clean[a] < clean[b] for a, b in combinations(world.relevant(q), 2))
    assert inverted or world.relevant(q).size < 3
