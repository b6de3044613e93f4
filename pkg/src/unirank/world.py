"""Synthetic corpora with a known graded-relevance oracle.

Queries and items carry unit latent vectors drawn uniformly from the sphere.
The relevance grade of a pair is the dot product of their latents plus a
small deterministic per-pair noise, bucketed by fixed thresholds. The
thresholds are quantiles of the exact marginal distribution of that noisy dot
product, so the grade histogram matches ``grade_probs`` by design.

Token sequences are sampled from a latent-conditioned mixture over the
vocabulary: every token id owns a random direction, and a sequence for latent
``u`` draws tokens with probability proportional to ``exp(kappa * <t_v, u>)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .optim import make_rng

WORLD_FORMAT_VERSION = 1

# stream ids for make_rng
_S_QUERY_LAT, _S_ITEM_LAT, _S_TOPICS, _S_ITEM_TOK, _S_QUERY_TOK, _S_NOISE = range(1, 7)


@dataclass(frozen=True)
class Item:
    id: int
    tokens: np.ndarray
    latent: np.ndarray


@dataclass(frozen=True)
class QuerySpec:
    id: int
    tokens: np.ndarray
    latent: np.ndarray


def _sphere(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _noisy_dot_cdf(v: float, dim: int, noise: float) -> float:
    # dot of two independent uniform unit vectors has density (1 - t^2)^((dim-3)/2) / B(1/2, (dim-1)/2)
    c = 1.0 / special.beta(0.5, (dim - 1) / 2.0)
    expo = (dim - 3) / 2.0
    if noise == 0.0:
        return float(stats.beta.cdf((v + 1.0) / 2.0, (dim - 1) / 2.0, (dim - 1) / 2.0))
    f = lambda t: c * (1.0 - t * t) ** expo * stats.norm.cdf((v - t) / noise)
    return integrate.quad(f, -1.0, 1.0, epsabs=1e-12, epsrel=1e-10, limit=200)[0]


def grade_thresholds(latent_dim: int, noise: float, grade_probs: Sequence[float]) -> np.ndarray:
    """Cut points t_1 < ... < t_G such that P(grade >= g) = sum(grade_probs[g-1:])."""
    tails = np.cumsum(np.asarray(grade_probs, dtype=float)[::-1])[::-1]
    lo, hi = -1.0 - 8.0 * noise - 1e-9, 1.0 + 8.0 * noise + 1e-9
    return np.array(
        [optimize.brentq(lambda v: _noisy_dot_cdf(v, latent_dim, noise) - (1.0 - p), lo, hi, xtol=1e-12) for p in tails]
    )


def dcg_of_grades(grades: Sequence[int] | np.ndarray, cutoff: int | None = None) -> float:
    """DCG with gain ``2^g - 1`` and discount ``1 / log2(pos + 1)`` for positions 1..cutoff."""
    g = np.asarray(grades, dtype=float)
    if cutoff is not None:
        g = g[:cutoff]
    if g.size == 0:
        return 0.0
    return float(np.sum((2.0**g - 1.0) / np.log2(np.arange(2, g.size + 2))))


class GapResult(NamedTuple):
    gap: float
    bound: float


@dataclass(frozen=True)
class World:
    seed: int
    n_items: int
    n_queries: int
    vocab_size: int
    latent_dim: int
    grade_levels: int
    grade_probs: tuple[float, ...]
    noise: float
    kappa: float
    query_latents: np.ndarray = field(repr=False)
    item_latents: np.ndarray = field(repr=False)
    topics: np.ndarray = field(repr=False)
    item_tokens: tuple[np.ndarray, ...] = field(repr=False)
    query_tokens: tuple[np.ndarray, ...] = field(repr=False)
    thresholds: np.ndarray = field(repr=False)
    planted: tuple[tuple[int, int, str], ...] = ()
    item_len: tuple[int, int] = (4, 32)
    query_len: tuple[int, int] = (4, 16)
    _grade_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @cached_property
    def items(self) -> list[Item]:
        return [Item(i, self.item_tokens[i], self.item_latents[i]) for i in range(self.n_items)]

    @cached_property
    def queries(self) -> list[QuerySpec]:
        return [QuerySpec(q, self.query_tokens[q], self.query_latents[q]) for q in range(self.n_queries)]

    def _check_query(self, query_id: int) -> None:
        if not 0 <= query_id < self.n_queries:
            raise KeyError(f"unknown query id {query_id}")

    def scores(self, query_id: int) -> np.ndarray:
        """Noisy latent dot products of one query against every item."""
        self._check_query(query_id)
        noise = make_rng(self.seed, _S_NOISE, query_id).standard_normal(self.n_items) * self.noise
        return self.item_latents @ self.query_latents[query_id] + noise

    def grades(self, query_id: int) -> np.ndarray:
        """Grades of every item for one query (read-only int array)."""
        cached = self._grade_cache.get(query_id)
        if cached is not None:
            return cached
        v = self.scores(query_id)
        g = np.searchsorted(self.thresholds, v, side="right").astype(np.int64)
        best = int(np.argmax(v))
        g[best] = max(g[best], 1)
        g.setflags(write=False)
        self._grade_cache[query_id] = g
        return g

    def relevant(self, query_id: int) -> np.ndarray:
        return np.flatnonzero(self.grades(query_id) > 0)

    def to_json(self) -> dict:
        return {
            "format_version": WORLD_FORMAT_VERSION,
            "kind": "world",
            "seed": self.seed,
            "n_items": self.n_items,
            "n_queries": self.n_queries,
            "vocab_size": self.vocab_size,
            "latent_dim": self.latent_dim,
            "grade_levels": self.grade_levels,
            "grade_probs": list(self.grade_probs),
            "noise": self.noise,
            "kappa": self.kappa,
            "planted": [list(p) for p in self.planted],
            "item_len": list(self.item_len),
            "query_len": list(self.query_len),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


DEFAULT_GRADE_PROBS = (0.0055, 0.003, 0.0015)


def generate_world(
    seed: int,
    n_items: int,
    n_queries: int,
    vocab_size: int = 256,
    latent_dim: int = 8,
    *,
    grade_probs: Sequence[float] = DEFAULT_GRADE_PROBS,
    noise: float = 0.05,
    kappa: float = 8.0,
    item_len: tuple[int, int] = (4, 32),
    query_len: tuple[int, int] = (4, 16),
    planted: Sequence[tuple[int, int, str]] = (),
) -> World:
    """Build a world deterministically from its arguments.

    ``planted`` entries ``(query_id, item_id, "equal" | "orthogonal")`` overwrite
    an item latent so that it equals, or is orthogonal to, a query latent. They
    are applied before item tokens are drawn.
    """
    if n_items < 1 or n_queries < 1 or latent_dim < 2:
        raise ValueError("n_items, n_queries must be positive and latent_dim >= 2")
    if vocab_size < 16:
        raise ValueError(f"vocab_size must be >= 16, got {vocab_size}")
    grade_probs = tuple(float(p) for p in grade_probs)
    if not (1 <= item_len[0] <= item_len[1] and 1 <= query_len[0] <= query_len[1]):
        raise ValueError(f"invalid length ranges {item_len}, {query_len}")
    if any(p <= 0 for p in grade_probs) or sum(grade_probs) >= 1:
        raise ValueError(f"grade_probs must be positive and sum below 1: {grade_probs}")

    q_lat = _sphere(make_rng(seed, _S_QUERY_LAT), n_queries, latent_dim)
    i_lat = _sphere(make_rng(seed, _S_ITEM_LAT), n_items, latent_dim)
    for q, i, kind in planted:
        u = q_lat[q]
        if kind == "equal":
            i_lat[i] = u
        elif kind == "orthogonal":
            w = i_lat[i] - (i_lat[i] @ u) * u
            i_lat[i] = w / np.linalg.norm(w)
        else:
            raise ValueError(f"unknown planted kind {kind!r}")
    topics = _sphere(make_rng(seed, _S_TOPICS), vocab_size, latent_dim)

    def draw_tokens(rng, lat, lo, hi):
        logits = kappa * lat @ topics.T
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        cdf = np.cumsum(probs, axis=1)
        cdf /= cdf[:, -1:]
        lengths = rng.integers(lo, hi + 1, size=len(lat))
        out = []
        for row, n in zip(cdf, lengths):
            toks = np.searchsorted(row, rng.random(n), side="right")
            out.append(np.minimum(toks, vocab_size - 1).astype(np.int64))
        return tuple(out)

    item_tokens = draw_tokens(make_rng(seed, _S_ITEM_TOK), i_lat, *item_len)
    query_tokens = draw_tokens(make_rng(seed, _S_QUERY_TOK), q_lat, *query_len)
    return World(
        seed=int(seed),
        n_items=n_items,
        n_queries=n_queries,
        vocab_size=vocab_size,
        latent_dim=latent_dim,
        grade_levels=len(grade_probs) + 1,
        grade_probs=grade_probs,
        noise=float(noise),
        kappa=float(kappa),
        query_latents=q_lat,
        item_latents=i_lat,
        topics=topics,
        item_tokens=item_tokens,
        query_tokens=query_tokens,
        thresholds=_thresholds_cached(latent_dim, float(noise), grade_probs),
        planted=tuple((int(q), int(i), str(k)) for q, i, k in planted),
        item_len=(int(item_len[0]), int(item_len[1])),
        query_len=(int(query_len[0]), int(query_len[1])),
    )


_THRESHOLD_CACHE: dict = {}


def _thresholds_cached(latent_dim: int, noise: float, grade_probs: tuple[float, ...]) -> np.ndarray:
    key = (latent_dim, noise, grade_probs)
    if key not in _THRESHOLD_CACHE:
        _THRESHOLD_CACHE[key] = grade_thresholds(latent_dim, noise, grade_probs)
    return _THRESHOLD_CACHE[key]


def load_world(path: str | Path) -> World:
    spec = json.loads(Path(path).read_text())
    return world_from_json(spec)


def world_from_json(spec: dict) -> World:
    if spec.get("kind") != "world":
        raise ValueError("not a world file")
    if spec.get("format_version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world format version {spec.get('format_version')}")
    return generate_world(
        spec["seed"],
        spec["n_items"],
        spec["n_queries"],
        spec["vocab_size"],
        spec["latent_dim"],
        grade_probs=spec["grade_probs"],
        noise=spec["noise"],
        kappa=spec["kappa"],
        planted=[tuple(p) for p in spec.get("planted", [])],
        item_len=tuple(spec.get("item_len", (4, 32))),
        query_len=tuple(spec.get("query_len", (4, 16))),
    )


def design_marginal(world: World) -> np.ndarray:
    """Target probability of each grade 0..G-1."""
    p = np.asarray(world.grade_probs)
    return np.concatenate([[1.0 - p.sum()], p])


def relevance(world: World, query_id: int, item_id: int) -> int:
    if not 0 <= item_id < world.n_items:
        raise KeyError(f"unknown item id {item_id}")
    return int(world.grades(query_id)[item_id])


def ideal_ranking(world: World, query_id: int) -> np.ndarray:
    """All item ids by grade descending; ties by ascending id."""
    g = world.grades(query_id)
    return np.lexsort((np.arange(world.n_items), -g))


def performance_gap(
    world: World,
    query_id: int,
    retrieved: Sequence[int] | np.ndarray,
    metric: str = "ndcg",
    cutoff: int | None = None,
) -> GapResult:
    """Best achievable metric loss from ranking only ``retrieved`` instead of the corpus.

    The bound sums, over relevant items outside ``retrieved``, each item's
    gain times the discount at its position in the corpus-ideal ranking,
    normalised like the metric.
    """
    if metric not in ("ndcg", "dcg"):
        raise ValueError(f"unsupported metric {metric!r}")
    g = world.grades(query_id)
    retrieved = np.unique(np.asarray(retrieved, dtype=np.int64))
    if retrieved.size and (retrieved.min() < 0 or retrieved.max() >= world.n_items):
        raise KeyError("retrieved ids out of range")
    ideal = ideal_ranking(world, query_id)
    best = dcg_of_grades(g[ideal], cutoff)
    sub = np.sort(g[retrieved])[::-1]
    achieved = dcg_of_grades(sub, cutoff)

    inside = np.zeros(world.n_items, dtype=bool)
    inside[retrieved] = True
    pos = np.arange(1, world.n_items + 1)
    missed = (~inside[ideal]) & (g[ideal] > 0)
    if cutoff is not None:
        missed &= pos <= cutoff
    bound = float(np.sum((2.0 ** g[ideal][missed] - 1.0) / np.log2(pos[missed] + 1)))

    if metric == "ndcg":
        if best == 0.0:
            return GapResult(0.0, 0.0)
        return GapResult((best - achieved) / best, bound / best)
    return GapResult(best - achieved, bound)


def split_queries(world: World, n_train: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``n_train`` query ids for training, the rest held out."""
    ids = np.arange(world.n_queries)
    return ids[:n_train], ids[n_train:]


def grade_histogram(world: World, query_ids: Sequence[int] | None = None) -> np.ndarray:
    ids = range(world.n_queries) if query_ids is None else query_ids
    hist = np.zeros(world.grade_levels, dtype=np.int64)
    for q in ids:
        hist += np.bincount(world.grades(int(q)), minlength=world.grade_levels)
    return hist


def expected_relevant_per_query(world: World) -> float:
    return world.n_items * float(sum(world.grade_probs))


def max_relevant_per_query(world: World, query_ids: Sequence[int] | None = None) -> int:
    ids = range(world.n_queries) if query_ids is None else query_ids
    return max((int((world.grades(int(q)) > 0).sum()) for q in ids), default=0)


__all__ = [
    "GapResult",
    "Item",
    "QuerySpec",
    "World",
    "dcg_of_grades",
    "design_marginal",
    "generate_world",
    "grade_histogram",
    "grade_thresholds",
    "ideal_ranking",
    "load_world",
    "performance_gap",
    "relevance",
    "split_queries",
    "world_from_json",
]
