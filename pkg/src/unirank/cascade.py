"""Disjointly trained two-stage baseline and the convex coupled-objective toy.

The cascade trains its first stage (a two-tower encoder) on the retrieval loss
alone, then freezes it and trains a listwise transformer on the ranking loss
over the encoder's pure top-k slates. The total step budget is split evenly
between the two phases so the comparison with joint training is step-matched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .listwise import LTModel, assemble_tensor, lt_forward_tensor
from .losses import approx_ndcg_loss, retrieve_loss
from .optim import AdamState, make_rng
from .trainer import (
    Batch,
    ConvergenceLog,
    StepRecord,
    TrainingConfig,
    _full_pool,
    apply_update,
    build_batch,
    check_finite,
    init_models,
    train_query_ids,
    validate_config,
)
from .tte import ItemIndex, TTEModel, build_index, corpus_counts, encode_counts, encode_queries, topk_indices
from .world import World

log = logging.getLogger(__name__)

_S_CASCADE = 104


@dataclass
class CascadeModel:
    l1: TTEModel
    l2: LTModel
    log: ConvergenceLog = field(default_factory=ConvergenceLog)
    phase1_steps: int = 0

    # uniform access shared with the unified system
    @property
    def tte(self) -> TTEModel:
        return self.l1

    @property
    def lt(self) -> LTModel:
        return self.l2


@dataclass
class CascadeState:
    l1: TTEModel
    l2: LTModel
    adam1: AdamState
    adam2: AdamState
    rng: np.random.Generator
    phase1_steps: int
    step: int = 0
    neg_pool: np.ndarray | None = None
    log: ConvergenceLog = field(default_factory=ConvergenceLog)
    _frozen: ItemIndex | None = field(default=None, repr=False)

    @property
    def phase(self) -> int:
        return 1 if self.step < self.phase1_steps else 2

    # the trainer's batch builder reads these names
    @property
    def tte(self) -> TTEModel:
        return self.l1

    def model(self) -> CascadeModel:
        return CascadeModel(self.l1, self.l2, self.log, self.phase1_steps)


def init_cascade(world: World, config: TrainingConfig) -> CascadeState:
    """Same initial weights as the unified system for the same seed."""
    validate_config(world, config)
    l1, l2 = init_models(world, config)
    return CascadeState(
        l1,
        l2,
        AdamState.for_params(l1.parameters(), lr=config.lr),
        AdamState.for_params(l2.parameters(), lr=config.lr),
        make_rng(config.seed, _S_CASCADE),
        phase1_steps=config.steps // 2,
    )


class _Phase1View:
    """Adapter exposing the attributes ``apply_update`` touches, bound to the L1 optimizer."""

    def __init__(self, st: CascadeState):
        self._st = st
        self.adam = st.adam1
        self.log = st.log

    @property
    def step(self) -> int:
        return self._st.step

    @step.setter
    def step(self, value: int) -> None:
        self._st.step = value


class _Phase2View(_Phase1View):
    def __init__(self, st: CascadeState):
        super().__init__(st)
        self.adam = st.adam2


def phase1_step(world: World, st: CascadeState, batch: Batch, config: TrainingConfig) -> StepRecord:
    """One update of L1 on the retrieval loss only."""
    p, m = batch.retrieval_pos.shape[1], batch.negatives.shape[1]
    ids = np.concatenate([batch.retrieval_pos.ravel(), batch.negatives.ravel()])
    uniq, inv = np.unique(ids, return_inverse=True)
    e_i = encode_counts(st.l1, "i", corpus_counts(world, "i")[uniq])[0]
    e_q = encode_counts(st.l1, "q", corpus_counts(world, "q")[batch.query_ids])[0]
    b = batch.query_ids.size
    e_q_col = ad.reshape(e_q, (b, -1, 1))
    e_pos = ad.reshape(ad.take_rows(e_i, inv[: b * p]), (b, p, -1))
    e_neg = ad.reshape(ad.take_rows(e_i, inv[b * p:]), (b, m, -1))
    s_pos = ad.reshape(e_pos @ e_q_col, (b, p))
    s_neg = ad.reshape(e_neg @ e_q_col, (b, m))
    w = config.weights
    comps = [retrieve_loss(s_pos, ad.expand(s_neg, 1, p), w.tau_retrieve), 0.0, 0.0, 0.0, 0.0]
    only = _retrieve_only(w)
    return apply_update(_Phase1View(st), st.l1.parameters(), comps, only)


def _retrieve_only(w):
    from dataclasses import replace

    return replace(w, rank=0.0, forward=0.0, backward=0.0, align=0.0)


def _rank_only(w):
    from dataclasses import replace

    return replace(w, retrieve=0.0, forward=0.0, backward=0.0, align=0.0)


@dataclass
class FrozenSlates:
    """Pure top-k slates of a frozen encoder with their LT inputs."""

    query_ids: np.ndarray  # (B,)
    item_ids: np.ndarray  # (B, k)
    tte_scores: np.ndarray  # (B, k)
    x: np.ndarray  # (B, k, d_in)
    grades: np.ndarray  # (B, k)


def frozen_slates(world: World, tte: TTEModel, query_ids: np.ndarray, k: int, index: ItemIndex | None = None) -> FrozenSlates:
    """Top-k retrieval per query (no forced positives), assembled for the LT."""
    index = index or build_index(tte, world)
    query_ids = np.asarray(query_ids, dtype=np.int64)
    e_q, r_q = encode_queries(tte, world, query_ids)
    scores = e_q @ index.emb.T
    ids = np.stack([topk_indices(scores[row], k) for row in range(query_ids.size)])
    s = np.take_along_axis(scores, ids, axis=1)
    x = assemble_tensor(Tensor(e_q), Tensor(index.emb[ids]), Tensor(r_q), Tensor(index.res[ids]), Tensor(s)).data
    grades = np.stack([world.grades(int(q))[ids[row]] for row, q in enumerate(query_ids)])
    return FrozenSlates(query_ids, ids, s, x, grades)


def phase2_step(world: World, st: CascadeState, config: TrainingConfig) -> StepRecord:
    """One update of L2 on the ranking loss over frozen L1 slates."""
    if st._frozen is None:
        st._frozen = build_index(st.l1, world)
    train_ids = train_query_ids(world, config)
    b = min(config.batch_size, train_ids.size)
    qids = np.sort(st.rng.choice(train_ids, size=b, replace=False))
    fs = frozen_slates(world, st.l1, qids, config.k, st._frozen)
    out = lt_forward_tensor(st.l2, Tensor(fs.x), config.pe_on)
    w = config.weights
    comps = [0.0, approx_ndcg_loss(out.scores, fs.grades, w.t_rank), 0.0, 0.0, 0.0]
    return apply_update(_Phase2View(st), st.l2.parameters(), comps, _rank_only(w))


def run_cascade(
    world: World,
    config: TrainingConfig,
    st: CascadeState,
    until: int | None = None,
    on_step: Callable[[CascadeState, StepRecord], None] | None = None,
) -> CascadeState:
    until = config.steps if until is None else until
    train_ids = train_query_ids(world, config)
    while st.step < until:
        if st.phase == 1:
            if config.mining and st.step > 0 and st.step % config.refresh_every == 0:
                check_finite([st.l1])
                st.neg_pool = _full_pool(world, st.l1, config, train_ids)
            index = build_index(st.l1, world)
            batch = build_batch(world, config, st, index)
            rec = phase1_step(world, st, batch, config)
        else:
            rec = phase2_step(world, st, config)
        if on_step is not None:
            on_step(st, rec)
    return st


def train_disjoint(
    world: World,
    config: TrainingConfig,
    on_step: Callable[[CascadeState, StepRecord], None] | None = None,
) -> CascadeModel:
    """Phase 1: L1 on the retrieval loss. Phase 2: L2 on the ranking loss with L1 frozen."""
    return run_cascade(world, config, init_cascade(world, config), on_step=on_step).model()


def cascade_rank(model: CascadeModel, query: int, world: World, k: int, pe_on: bool = False) -> np.ndarray:
    """L1 top-k reordered by L2 score (ties broken by item id)."""
    fs = frozen_slates(world, model.l1, np.array([query]), k)
    with ad.no_grad():
        s = lt_forward_tensor(model.l2, Tensor(fs.x), pe_on).scores.data[0]
    ids = fs.item_ids[0]
    return ids[np.lexsort((ids, -s))]


# ---------------------------------------------------------------------------
# convex toy: two coupled quadratics over one shared parameter vector


@dataclass(frozen=True)
class QuadraticToy:
    """``L_r = 1/2 (t - a)' A (t - a)`` and ``L_k = 1/2 (t - b)' B (t - b)`` over ``t in R^n``.

    The retrieval stage owns the first ``split`` coordinates and the ranking
    stage the rest.
    """

    A: np.ndarray
    B: np.ndarray
    a: np.ndarray
    b: np.ndarray
    split: int
    lam_r: float = 1.0
    lam_k: float = 1.0


def _check_pd(m: np.ndarray, name: str) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.allclose(m, m.T):
        raise ValueError(f"{name} must be a symmetric square matrix")
    if np.linalg.eigvalsh(m).min() <= 1e-12 * max(1.0, np.abs(m).max()):
        raise ValueError(f"{name} is rank-deficient (not positive definite)")


def joint_objective(toy: QuadraticToy, t: np.ndarray) -> float:
    dr, dk = t - toy.a, t - toy.b
    return float(toy.lam_r * 0.5 * dr @ toy.A @ dr + toy.lam_k * 0.5 * dk @ toy.B @ dk)


def joint_optimum(toy: QuadraticToy) -> np.ndarray:
    h = toy.lam_r * toy.A + toy.lam_k * toy.B
    return np.linalg.solve(h, toy.lam_r * toy.A @ toy.a + toy.lam_k * toy.B @ toy.b)


def disjoint_optimum(toy: QuadraticToy) -> np.ndarray:
    """Each stage minimises only its own loss; the deployed vector takes the
    retrieval stage's block from ``a`` and the ranking stage's block from ``b``."""
    return np.concatenate([toy.a[: toy.split], toy.b[toy.split:]])


def joint_loss_comparison(toy: QuadraticToy) -> tuple[float, float]:
    """Combined loss at the joint optimum and at the disjoint solution."""
    _check_pd(toy.A, "A")
    _check_pd(toy.B, "B")
    if not 0 <= toy.split <= toy.a.size:
        raise ValueError("split outside the parameter vector")
    return joint_objective(toy, joint_optimum(toy)), joint_objective(toy, disjoint_optimum(toy))


def random_toy(rng: np.random.Generator, n: int = 6, split: int | None = None) -> QuadraticToy:
    def spd():
        q = rng.standard_normal((n, n))
        return q @ q.T + 0.1 * np.eye(n)

    return QuadraticToy(spd(), spd(), rng.standard_normal(n), rng.standard_normal(n), n // 2 if split is None else split)
