"""Two-tower encoder: attention-pooled token embeddings, per-tower MLPs, cosine retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .autodiff import Tensor
from .world import World


@dataclass(frozen=True)
class TTEConfig:
    vocab_size: int
    d_tok: int = 32
    hidden: int = 64
    d: int = 32
    d_r: int = 8


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TTEModel:
    """Shared token table plus a query tower and an item tower.

    Each tower owns a pooling vector, a two-layer tanh MLP producing the
    L2-normalised embedding, and a separate two-layer residual extractor over
    the same pooled vector.
    """

    TOWERS = ("q", "i")

    def __init__(self, cfg: TTEConfig, rng: np.random.Generator):
        self.cfg = cfg
        p: dict[str, Tensor] = {}

        def new(name, shape, fan_in):
            p[name] = Tensor(uniform_init(rng, shape, fan_in), requires_grad=True, name=name)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)

        new("tok_emb", (cfg.vocab_size, cfg.d_tok), cfg.d_tok)
        for t in self.TOWERS:
            new(f"{t}.pool", (cfg.d_tok,), cfg.d_tok)
            new(f"{t}.w1", (cfg.d_tok, cfg.hidden), cfg.d_tok)
            zeros(f"{t}.b1", (cfg.hidden,))
            new(f"{t}.w2", (cfg.hidden, cfg.d), cfg.hidden)
            zeros(f"{t}.b2", (cfg.d,))
            new(f"{t}.rw1", (cfg.d_tok, cfg.hidden), cfg.d_tok)
            zeros(f"{t}.rb1", (cfg.hidden,))
            new(f"{t}.rw2", (cfg.hidden, cfg.d_r), cfg.hidden)
            zeros(f"{t}.rb2", (cfg.d_r,))
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class Encoded:
    emb: Tensor  # (n, d), unit rows
    res: Tensor  # (n, d_r)
    pooled: Tensor  # (n, d_tok)
    alpha: np.ndarray  # (total_tokens,), pooling weight of each token occurrence
    segments: np.ndarray  # (total_tokens,), owning sequence of each token


def token_counts(sequences: Sequence[np.ndarray], vocab_size: int) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if len(sequences) == 0 or np.any(lengths == 0):
        raise ValueError("cannot encode an empty token sequence")
    flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in sequences])
    if flat.min() < 0 or flat.max() >= vocab_size:
        raise ValueError("token id outside vocabulary")
    seg = np.repeat(np.arange(len(sequences)), lengths)
    counts = sparse.csr_matrix(
        (np.ones(flat.size), (seg, flat)), shape=(len(sequences), vocab_size)
    )
    counts.sum_duplicates()
    return counts, flat, seg


def corpus_counts(world: World, tower: str) -> sparse.csr_matrix:
    """Token-count matrix of every item (``"i"``) or query (``"q"``), cached on the world."""
    key = ("counts", tower)
    cached = world._grade_cache.get(key)
    if cached is None:
        seqs = world.item_tokens if tower == "i" else world.query_tokens
        cached = token_counts(seqs, world.vocab_size)[0]
        world._grade_cache[key] = cached
    return cached


def encode_counts(model: TTEModel, tower: str, counts: sparse.csr_matrix) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Encode sequences given as token-count rows; returns ``(emb, res, pooled, vocab_weights)``.

    Pooling weights are a softmax of ``<w_pool, h_j>`` over the token
    occurrences of a sequence. The score depends only on the token id, so the
    pooled vector is ``sum_v c_v exp(s_v) h_v / sum_v c_v exp(s_v)``.
    """
    if tower not in TTEModel.TOWERS:
        raise ValueError(f"unknown tower {tower!r}")
    if counts.shape[1] != model.cfg.vocab_size:
        raise ad.ShapeError(f"count matrix has {counts.shape[1]} columns, vocabulary is {model.cfg.vocab_size}")
    p = model.params
    table = p["tok_emb"]
    s = table @ p[f"{tower}.pool"]
    w = ad.exp(s - float(s.data.max()))
    num = ad.sparse_matmul(counts, ad.scale_rows(table, w))
    den = ad.sparse_matmul(counts, w)
    pooled = ad.scale_rows(num, 1.0 / den)
    hid = ad.tanh(pooled @ p[f"{tower}.w1"] + p[f"{tower}.b1"])
    emb = ad.l2_normalize(hid @ p[f"{tower}.w2"] + p[f"{tower}.b2"])
    rhid = ad.tanh(pooled @ p[f"{tower}.rw1"] + p[f"{tower}.rb1"])
    res = rhid @ p[f"{tower}.rw2"] + p[f"{tower}.rb2"]
    return emb, res, pooled, w


def encode(model: TTEModel, tower: str, sequences: Sequence[np.ndarray]) -> Encoded:
    """Encode a batch of token sequences with one tower (see :func:`encode_counts`)."""
    counts, flat, seg = token_counts(sequences, model.cfg.vocab_size)
    emb, res, pooled, w = encode_counts(model, tower, counts)
    den = counts @ w.data
    return Encoded(emb, res, pooled, w.data[flat] / den[seg], seg)


def encode_query(model: TTEModel, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with ad.no_grad():
        enc = encode(model, "q", [tokens])
    return enc.emb.data[0], enc.res.data[0]


def encode_item(model: TTEModel, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with ad.no_grad():
        enc = encode(model, "i", [tokens])
    return enc.emb.data[0], enc.res.data[0]


def similarity(e_q: np.ndarray, e_i: np.ndarray) -> float:
    nq, ni = np.linalg.norm(e_q), np.linalg.norm(e_i)
    if nq == 0.0 or ni == 0.0:
        raise ValueError("similarity of a zero vector is undefined")
    return float(np.dot(e_q, e_i) / (nq * ni))


@dataclass
class ItemIndex:
    """Precomputed item embeddings and residuals for the whole corpus."""

    emb: np.ndarray
    res: np.ndarray

    @property
    def n_items(self) -> int:
        return self.emb.shape[0]


def build_index(model: TTEModel, world: World, chunk: int = 4096) -> ItemIndex:
    embs, ress = [], []
    counts = corpus_counts(world, "i")
    with ad.no_grad():
        for start in range(0, world.n_items, chunk):
            emb, res, _, _ = encode_counts(model, "i", counts[start:start + chunk])
            embs.append(emb.data)
            ress.append(res.data)
    return ItemIndex(np.concatenate(embs), np.concatenate(ress))


def encode_queries(model: TTEModel, world: World, query_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    with ad.no_grad():
        emb, res, _, _ = encode_counts(model, "q", corpus_counts(world, "q")[np.asarray(query_ids, dtype=np.int64)])
    return emb.data, res.data


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, descending; ties by ascending index."""
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if k == n:
        cand = np.arange(n)
    else:
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def top_k(model: TTEModel, query_id: int, world: World, k: int, index: ItemIndex | None = None):
    """Exact cosine top-k over the corpus, returned as a :class:`CandidateSlate`."""
    from .listwise import CandidateSlate

    if not 1 <= k <= world.n_items:
        raise ValueError(f"k={k} outside [1, {world.n_items}]")
    index = index or build_index(model, world)
    e_q, r_q = encode_query(model, world.query_tokens[query_id])
    scores = index.emb @ e_q
    ids = topk_indices(scores, k)
    return CandidateSlate(
        query_id=int(query_id),
        item_ids=ids,
        tte_scores=scores[ids],
        e_q=e_q,
        r_q=r_q,
        e_items=index.emb[ids],
        r_items=index.res[ids],
    )
