"""Joint training of the two-tower encoder and the listwise transformer."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import alignment_loss, backward_distill_loss, forward_distill
from .listwise import LTConfig, LTModel, assemble_tensor, lt_forward_tensor
from .losses import COMPONENTS, LossWeights, approx_ndcg_loss, retrieve_loss, total_loss
from .optim import AdamState, adam_step, make_rng
from .tte import ItemIndex, TTEConfig, TTEModel, build_index, corpus_counts, encode_counts, encode_queries, topk_indices
from .world import World, max_relevant_per_query

log = logging.getLogger(__name__)

_S_TTE_INIT, _S_LT_INIT, _S_TRAIN = 101, 102, 103


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    negatives: int = 10
    positives_per_query: int = 4
    k: int = 50
    lr: float = 1e-3
    refresh_every: int = 200
    pool_size: int = 20
    mining: bool = True
    hard_fraction: float = 0.5
    n_train_queries: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    disable_forward: bool = False
    disable_backward: bool = False
    disable_align: bool = False
    pe_on: bool = False
    d_tok: int = 32
    hidden: int = 64
    d: int = 32
    d_r: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return replace(
            w,
            forward=0.0 if self.disable_forward else w.forward,
            backward=0.0 if self.disable_backward else w.backward,
            align=0.0 if self.disable_align else w.align,
        )

    def tte_config(self, vocab_size: int) -> TTEConfig:
        return TTEConfig(vocab_size, self.d_tok, self.hidden, self.d, self.d_r)

    def lt_config(self) -> LTConfig:
        return LTConfig(self.d, self.d_r, self.d_model, self.n_heads, self.n_layers, self.d_ff)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def train_query_ids(world: World, config: TrainingConfig) -> np.ndarray:
    n = world.n_queries if config.n_train_queries is None else config.n_train_queries
    return np.arange(n)


def validate_config(world: World, config: TrainingConfig) -> None:
    if config.negatives < 1:
        raise ValueError("negatives per query must be >= 1")
    if not 0.0 <= config.hard_fraction <= 1.0:
        raise ValueError("hard_fraction must lie in [0, 1]")
    if not 1 <= config.k <= world.n_items:
        raise ValueError(f"slate size k={config.k} outside [1, {world.n_items}]")
    need = max_relevant_per_query(world, train_query_ids(world, config)) + 1
    if config.k < need and config.k < world.n_items:
        raise ValueError(f"slate size k={config.k} must be >= max relevant per query + 1 = {need}")


@dataclass
class StepRecord:
    step: int
    retrieve: float
    rank: float
    forward: float
    backward: float
    align: float
    total: float
    grad_norm: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConvergenceLog:
    records: list[StepRecord] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Batch:
    query_ids: np.ndarray  # (B,)
    positives: list[np.ndarray]  # I+ per query
    retrieval_pos: np.ndarray  # (B, P) sampled positives for the retrieval loss
    negatives: np.ndarray  # (B, m)
    slates: np.ndarray  # (B, k) item ids, sorted by TTE score
    grades: np.ndarray  # (B, k)


@dataclass
class TrainState:
    tte: TTEModel
    lt: LTModel
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    neg_pool: np.ndarray | None = None  # (n_queries, pool_size); rows of held-out queries are unused
    log: ConvergenceLog = field(default_factory=ConvergenceLog)

    def parameters(self) -> list[Tensor]:
        return self.tte.parameters() + self.lt.parameters()


def init_models(world: World, config: TrainingConfig) -> tuple[TTEModel, LTModel]:
    tte = TTEModel(config.tte_config(world.vocab_size), make_rng(config.seed, _S_TTE_INIT))
    lt = LTModel(config.lt_config(), make_rng(config.seed, _S_LT_INIT))
    return tte, lt


def init_state(world: World, config: TrainingConfig) -> TrainState:
    validate_config(world, config)
    tte, lt = init_models(world, config)
    params = tte.parameters() + lt.parameters()
    return TrainState(tte, lt, AdamState.for_params(params, lr=config.lr), make_rng(config.seed, _S_TRAIN))


def build_slate(scores: np.ndarray, positives: np.ndarray, k: int) -> np.ndarray:
    """Top-k by score with every positive forced in, dropping the lowest non-relevant entries."""
    top = topk_indices(scores, k)
    missing = np.setdiff1d(positives, top, assume_unique=False)
    if missing.size:
        is_pos = np.isin(top, positives)
        drop = np.flatnonzero(~is_pos)[::-1][: missing.size]
        if drop.size < missing.size:
            raise ValueError("slate too small to hold every positive")
        keep = np.delete(top, drop)
        top = np.concatenate([keep, missing])
    return top[np.lexsort((top, -scores[top]))]


def sample_uniform_negatives(rng: np.random.Generator, grades: np.ndarray, m: int) -> np.ndarray:
    pool = np.flatnonzero(grades == 0)
    return rng.choice(pool, size=m, replace=m > pool.size)


def n_hard_negatives(config: TrainingConfig) -> int:
    """Negatives per query taken from the mined pool once it exists; the rest are uniform grade-0 draws."""
    return int(round(config.negatives * config.hard_fraction))


def build_batch(
    world: World,
    config: TrainingConfig,
    state: TrainState,
    index: ItemIndex,
    query_ids: np.ndarray | None = None,
) -> Batch:
    """Sample queries, retrieval positives/negatives, and positive-complete slates.

    Draw order on ``state.rng``: the query sample, then per query the
    retrieval positives, the hard negatives (once a pool exists) and the
    uniform negatives.
    """
    rng = state.rng
    train_ids = train_query_ids(world, config)
    if query_ids is None:
        b = min(config.batch_size, train_ids.size)
        query_ids = np.sort(rng.choice(train_ids, size=b, replace=False))
    e_q, _ = encode_queries(state.tte, world, query_ids)
    all_scores = e_q @ index.emb.T
    if not np.all(np.isfinite(all_scores)):
        raise NonFiniteLossError(state.step, {"retrieval_scores": math.nan})

    kept, positives, rpos, negs, slates, grades = [], [], [], [], [], []
    for row, q in enumerate(query_ids):
        g = world.grades(int(q))
        pos = np.flatnonzero(g > 0)
        if pos.size == 0:
            log.warning("query %d has no relevant items; skipped", q)
            continue
        rp = rng.choice(pos, size=config.positives_per_query, replace=True)
        n_hard = n_hard_negatives(config) if state.neg_pool is not None and config.mining else 0
        if n_hard:
            pool = state.neg_pool[int(q)]
            hard = rng.choice(pool, size=n_hard, replace=n_hard > pool.size)
            neg = np.concatenate([hard, sample_uniform_negatives(rng, g, config.negatives - n_hard)])
        else:
            neg = sample_uniform_negatives(rng, g, config.negatives)
        slate = build_slate(all_scores[row], pos, config.k)
        kept.append(int(q))
        positives.append(pos)
        rpos.append(rp)
        negs.append(neg)
        slates.append(slate)
        grades.append(g[slate])
    return Batch(
        np.array(kept, dtype=np.int64),
        positives,
        np.array(rpos, dtype=np.int64).reshape(len(kept), config.positives_per_query),
        np.array(negs, dtype=np.int64).reshape(len(kept), config.negatives),
        np.array(slates, dtype=np.int64).reshape(len(kept), -1),
        np.array(grades, dtype=np.int64).reshape(len(kept), -1),
    )


def mine_hard_negatives(
    world: World, model: TTEModel, pool_size: int, query_ids: Sequence[int], index: ItemIndex | None = None
) -> np.ndarray:
    """Top-scoring grade-0 items per query under the current encoder, ``(len(query_ids), pool_size)``."""
    index = index or build_index(model, world)
    e_q, _ = encode_queries(model, world, query_ids)
    scores = e_q @ index.emb.T
    out = np.empty((len(query_ids), pool_size), dtype=np.int64)
    for row, q in enumerate(query_ids):
        irrelevant = np.flatnonzero(world.grades(int(q)) == 0)
        s = scores[row, irrelevant]
        out[row] = irrelevant[topk_indices(s, min(pool_size, irrelevant.size))]
    return out


@dataclass
class Forward:
    """Differentiable quantities of one joint forward pass."""

    s_tte: Tensor  # (B, k)
    s_lt: Tensor  # (B, k)
    z: Tensor  # (B, k, d_model)
    e_slate: Tensor  # (B, k, d)
    s_pos: Tensor  # (B, P)
    s_neg: Tensor  # (B, m)


def joint_forward(world: World, tte: TTEModel, lt: LTModel, batch: Batch, pe_on: bool) -> Forward:
    b, k = batch.slates.shape
    p = batch.retrieval_pos.shape[1]
    m = batch.negatives.shape[1]
    needed = np.concatenate([batch.slates.ravel(), batch.retrieval_pos.ravel(), batch.negatives.ravel()])
    uniq, inverse = np.unique(needed, return_inverse=True)
    enc_i = encode_counts(tte, "i", corpus_counts(world, "i")[uniq])
    enc_q = encode_counts(tte, "q", corpus_counts(world, "q")[np.asarray(batch.query_ids)])
    n_sl = b * k
    idx_slate = inverse[:n_sl]
    idx_pos = inverse[n_sl:n_sl + b * p]
    idx_neg = inverse[n_sl + b * p:]

    e_q = enc_q[0]
    e_q_col = ad.reshape(e_q, (b, -1, 1))
    e_slate = ad.reshape(ad.take_rows(enc_i[0], idx_slate), (b, k, -1))
    r_slate = ad.reshape(ad.take_rows(enc_i[1], idx_slate), (b, k, -1))
    s_tte = ad.reshape(e_slate @ e_q_col, (b, k))
    e_pos = ad.reshape(ad.take_rows(enc_i[0], idx_pos), (b, p, -1))
    e_neg = ad.reshape(ad.take_rows(enc_i[0], idx_neg), (b, m, -1))
    s_pos = ad.reshape(e_pos @ e_q_col, (b, p))
    s_neg = ad.reshape(e_neg @ e_q_col, (b, m))

    x = assemble_tensor(e_q, e_slate, enc_q[1], r_slate, s_tte)
    out = lt_forward_tensor(lt, x, pe_on)
    return Forward(s_tte, out.scores, out.z, e_slate, s_pos, s_neg)


def loss_components(fw: Forward, batch: Batch, weights: LossWeights, align_w: Tensor) -> list:
    """The five loss terms; disabled terms (zero weight) come back as the float 0.0."""
    p = fw.s_pos.shape[1]
    comps: list = [0.0] * 5
    lam = weights.as_tuple()
    if lam[0]:
        comps[0] = retrieve_loss(fw.s_pos, ad.expand(fw.s_neg, 1, p), weights.tau_retrieve)
    if lam[1]:
        comps[1] = approx_ndcg_loss(fw.s_lt, batch.grades, weights.t_rank)
    if lam[2]:
        comps[2] = forward_distill(fw.s_lt, fw.s_tte, weights.tau_distill)
    if lam[3]:
        comps[3] = backward_distill_loss(fw.s_tte, fw.s_lt)
    if lam[4]:
        comps[4] = alignment_loss(fw.e_slate, fw.z, align_w)
    return comps


def _as_float(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def apply_update(
    state: TrainState,
    params: list[Tensor],
    comps: list,
    weights: LossWeights,
) -> StepRecord:
    """Backpropagate the weighted total, check finiteness, take one Adam step."""
    values = {name: _as_float(c) for name, c in zip(COMPONENTS, comps)}
    total = total_loss(comps, weights)
    total_value = _as_float(total)
    if not all(math.isfinite(v) for v in values.values()) or not math.isfinite(total_value):
        raise NonFiniteLossError(state.step, values)
    for prm in params:
        prm.zero_grad()
    if isinstance(total, Tensor) and total.requires_grad:
        grads = ad.backward(total, params)
    else:
        grads = [np.zeros_like(prm.data) for prm in params]
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not math.isfinite(gnorm):
        raise NonFiniteLossError(state.step, {**values, "grad_norm": gnorm})
    adam_step(state.adam, params, grads)
    if not all(np.all(np.isfinite(prm.data)) for prm in params):
        raise NonFiniteLossError(state.step, {**values, "grad_norm": gnorm, "parameters": math.nan})
    rec = StepRecord(state.step, **values, total=total_value, grad_norm=gnorm)
    state.step += 1
    state.log.append(rec)
    return rec


def train_step(world: World, state: TrainState, batch: Batch, config: TrainingConfig) -> StepRecord:
    """One Adam update of all encoder, transformer and alignment parameters."""
    weights = config.effective_weights()
    fw = joint_forward(world, state.tte, state.lt, batch, config.pe_on)
    comps = loss_components(fw, batch, weights, state.lt.params["align.W"])
    return apply_update(state, state.parameters(), comps, weights)


def check_finite(models: Sequence) -> None:
    for model in models:
        for name, prm in model.params.items():
            if not np.all(np.isfinite(prm.data)):
                raise NonFiniteLossError(-1, {name: math.nan})


def run(
    world: World,
    config: TrainingConfig,
    state: TrainState,
    until: int | None = None,
    on_step: Callable[[TrainState, StepRecord], None] | None = None,
) -> TrainState:
    """Advance ``state`` to step ``until`` (default ``config.steps``)."""
    until = config.steps if until is None else until
    train_ids = train_query_ids(world, config)
    while state.step < until:
        if config.mining and state.step > 0 and state.step % config.refresh_every == 0:
            check_finite([state.tte, state.lt])
            state.neg_pool = _full_pool(world, state.tte, config, train_ids)
        index = build_index(state.tte, world)
        batch = build_batch(world, config, state, index)
        rec = train_step(world, state, batch, config)
        if on_step is not None:
            on_step(state, rec)
    return state


def _full_pool(world: World, tte: TTEModel, config: TrainingConfig, train_ids: np.ndarray) -> np.ndarray:
    pool = mine_hard_negatives(world, tte, config.pool_size, train_ids)
    full = np.zeros((world.n_queries, pool.shape[1]), dtype=np.int64)
    full[train_ids] = pool
    return full


def fit(
    world: World,
    config: TrainingConfig,
    on_step: Callable[[TrainState, StepRecord], None] | None = None,
) -> tuple[TTEModel, LTModel, ConvergenceLog]:
    state = run(world, config, init_state(world, config), on_step=on_step)
    return state.tte, state.lt, state.log
