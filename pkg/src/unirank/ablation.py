"""Distillation-weight sweeps on small worlds."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .losses import LossWeights
from .metrics import RankingSystem, run_system
from .trainer import TrainingConfig, fit
from .world import World, generate_world

MICRO_WORLD = dict(n_items=300, n_queries=60)
MICRO_TRAIN = dict(steps=300, n_train_queries=40, k=20, batch_size=8, refresh_every=100)


def score_mse(world: World, tte, lt, query_ids: Sequence[int], k: int, pe_on: bool = False) -> float:
    """Mean squared gap between encoder and transformer scores over pure top-k slates."""
    runs = run_system(RankingSystem("lt-ttd", tte, lt, pe_on), world, query_ids, k)
    return float(np.mean([np.mean((r["s_tte"] - r["s_lt"]) ** 2) for r in runs]))


def forward_weight_sweep(
    world: World, base: TrainingConfig, lambdas: Sequence[float], held_out: Sequence[int]
) -> list[float]:
    out = []
    for lam in lambdas:
        cfg = replace(base, weights=replace(base.weights, forward=float(lam)), disable_forward=False)
        tte, lt, _ = fit(world, cfg)
        out.append(score_mse(world, tte, lt, held_out, cfg.k, cfg.pe_on))
    return out


def distillation_monotonicity(seeds: Sequence[int] = (0, 1, 2), lambdas: Sequence[float] = (0.0, 0.1, 1.0)):
    """Median over seeds of held-out score MSE is non-increasing in the forward weight (micro worlds)."""
    from .theorems import PropertyResult

    table = []
    for s in seeds:
        world = generate_world(s, **MICRO_WORLD)
        cfg = TrainingConfig(seed=s, weights=LossWeights(), **MICRO_TRAIN)
        held = range(MICRO_TRAIN["n_train_queries"], MICRO_WORLD["n_queries"])
        table.append(forward_weight_sweep(world, cfg, lambdas, list(held)))
    med = np.median(np.array(table), axis=0)
    ok = bool(np.all(np.diff(med) <= 0))
    return PropertyResult(
        "distillation_mse_nonincreasing",
        ok,
        "median score MSE by forward weight " + ", ".join(f"{l:g}: {m:.4g}" for l, m in zip(lambdas, med)),
    )
