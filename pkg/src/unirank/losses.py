"""Retrieval, ranking and weighted total objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LossWeights:
    retrieve: float = 1.0
    rank: float = 1.0
    forward: float = 0.5
    backward: float = 0.5
    align: float = 0.1
    tau_retrieve: float = 1.0
    tau_distill: float = 1.0
    t_rank: float = 1.0

    def __post_init__(self):
        lams = self.as_tuple()
        if any(x < 0 for x in lams):
            raise ValueError(f"loss weights must be non-negative: {lams}")
        if min(self.tau_retrieve, self.tau_distill, self.t_rank) <= 0:
            raise ValueError("temperatures must be positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.retrieve, self.rank, self.forward, self.backward, self.align)


COMPONENTS = ("retrieve", "rank", "forward", "backward", "align")


def retrieve_loss(s_pos, s_negs, tau: float = 1.0) -> Tensor:
    """Softmax cross-entropy of one positive against its negatives.

    ``s_pos`` has shape ``(...)`` and ``s_negs`` shape ``(..., m)``; the result
    is averaged over the leading axes.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_pos, s_negs = ad.as_tensor(s_pos), ad.as_tensor(s_negs)
    lead = s_pos.shape
    if s_negs.shape[:-1] != lead:
        raise ad.ShapeError(f"retrieve_loss: positives {s_pos.shape} vs negatives {s_negs.shape}")
    logits = ad.concat([ad.reshape(s_pos, lead + (1,)), s_negs], axis=-1) * (1.0 / tau)
    nll = -ad.log_softmax(logits, axis=-1)[..., 0]
    return ad.mean(nll)


def soft_ranks(scores, t_rank: float) -> Tensor:
    """r_j = 1 + sum_{l != j} sigmoid((s_l - s_j) / T) over the last axis."""
    s = ad.as_tensor(scores)
    pair = ad.sigmoid(ad.pairwise_diff(s) * (1.0 / t_rank))
    # the l == j term contributes sigmoid(0) = 1/2
    return ad.tsum(pair, axis=-1) + 0.5


def ideal_dcg(grades: np.ndarray) -> np.ndarray:
    g = -np.sort(-np.asarray(grades, dtype=float), axis=-1)
    disc = 1.0 / np.log2(np.arange(2, g.shape[-1] + 2))
    return ((2.0**g - 1.0) * disc).sum(axis=-1)


def approx_ndcg_loss(scores, grades, t_rank: float = 1.0) -> Tensor:
    """1 - ApproxNDCG over the last axis, averaged over lists.

    Lists without a relevant entry contribute 0.
    """
    if t_rank <= 0:
        raise ValueError("t_rank must be positive")
    s = ad.as_tensor(scores)
    grades = np.asarray(grades, dtype=float)
    if grades.shape != s.shape:
        raise ad.ShapeError(f"approx_ndcg_loss: scores {s.shape} vs grades {grades.shape}")
    gains = 2.0**grades - 1.0
    idcg = ideal_dcg(grades)
    valid = idcg > 0
    safe = np.where(valid, idcg, 1.0)
    ranks = soft_ranks(s, t_rank)
    dcg = ad.tsum(ad.div(gains * LN2, ad.log(ranks + 1.0)), axis=-1)
    per_list = (1.0 - dcg / safe) * valid.astype(float)
    return ad.mean(per_list)


def total_loss(components: Sequence, weights: LossWeights):
    """Weighted sum of the five components (floats or Tensors)."""
    if len(components) != 5:
        raise ValueError(f"expected 5 loss components, got {len(components)}")
    out = None
    for lam, comp in zip(weights.as_tuple(), components):
        if lam != 0.0:
            out = lam * comp if out is None else out + lam * comp
    if out is None:
        # every weight is zero: keep the Tensor type so callers can still backpropagate
        return 0.0 * components[0] if isinstance(components[0], Tensor) else 0.0
    return out
