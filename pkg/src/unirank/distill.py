"""Coupling losses between the two-tower encoder and the listwise transformer.

Both distillation directions detach the teacher: forward distillation moves
only the encoder scores towards the transformer's rank distribution, and
backward distillation moves only the transformer scores towards the encoder's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class RankDistribution:
    probs: np.ndarray
    tau: float


def to_distribution(scores, tau: float) -> RankDistribution:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ValueError("scores must be a non-empty vector")
    return RankDistribution(ad.softmax_np(s / tau), float(tau))


def forward_distill_loss(p_lt: RankDistribution, p_tte: RankDistribution) -> float:
    """KL(P_LT || P_TTE)."""
    if p_lt.probs.shape != p_tte.probs.shape:
        raise ShapeError(f"distributions over {p_lt.probs.shape} and {p_tte.probs.shape} candidates")
    if p_lt.tau != p_tte.tau:
        raise ValueError("both distributions must share one temperature")
    p, q = p_lt.probs, p_tte.probs
    return float(np.sum(p * (np.log(p) - np.log(q))))


def forward_distill(s_lt, s_tte, tau: float) -> Tensor:
    """Batch-mean KL between softmax(s_lt/tau) and softmax(s_tte/tau) over the last axis.

    Gradient reaches ``s_tte`` only.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s_lt, s_tte = ad.as_tensor(s_lt), ad.as_tensor(s_tte)
    if s_lt.shape != s_tte.shape:
        raise ShapeError(f"forward_distill: shapes {s_lt.shape} and {s_tte.shape}")
    log_p = ad.log_softmax_np(s_lt.data / tau, axis=-1)
    p = np.exp(log_p)
    log_q = ad.log_softmax(s_tte * (1.0 / tau), axis=-1)
    kl = ad.tsum(p * (log_p - log_q), axis=-1)
    return ad.mean(kl)


def backward_distill_loss(s_tte, s_lt) -> Tensor:
    """Mean squared gap between the scores; gradient reaches ``s_lt`` only."""
    s_tte, s_lt = ad.as_tensor(s_tte), ad.as_tensor(s_lt)
    if s_tte.shape != s_lt.shape:
        raise ShapeError(f"backward_distill_loss: lengths {s_tte.shape} and {s_lt.shape}")
    return ad.mean(ad.square(s_lt - s_tte.data))


def alignment_loss(e_items, z_final, W) -> Tensor:
    """(1/k) sum_j ||e_j - W z_j||^2, averaged over any leading batch axis."""
    e_items, z_final, W = ad.as_tensor(e_items), ad.as_tensor(z_final), ad.as_tensor(W)
    if W.ndim != 2 or z_final.shape[-1] != W.shape[1] or e_items.shape[-1] != W.shape[0] \
            or e_items.shape[:-1] != z_final.shape[:-1]:
        raise ShapeError(
            f"alignment_loss: e {e_items.shape}, z {z_final.shape}, W {W.shape} are inconsistent"
        )
    resid = e_items - z_final @ ad.transpose(W)
    return ad.mean(ad.tsum(ad.square(resid), axis=-1))
