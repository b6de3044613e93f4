"""The standard paired-seed comparison between the unified system and the cascade."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .cascade import train_disjoint
from .losses import LossWeights
from .metrics import MetricsReport, RankingSystem, evaluate_system
from .trainer import TrainingConfig, fit
from .world import World, generate_world

STANDARD_WORLD = dict(n_items=2000, n_queries=300)
N_TRAIN = 200


def standard_config(seed: int, **overrides) -> TrainingConfig:
    return replace(TrainingConfig(seed=seed, n_train_queries=N_TRAIN, weights=LossWeights()), **overrides)


def standard_world(seed: int) -> World:
    return generate_world(seed, **STANDARD_WORLD)


@dataclass
class RunResult:
    system: str
    seed: int
    forward_weight: float
    report: MetricsReport
    totals: np.ndarray  # total loss per step

    @property
    def e_prop(self) -> float:
        return self.report.mean["e_prop"]

    def ndcg(self, cutoff: int = 10) -> float:
        return self.report.mean[f"ndcg@{cutoff}"]

    @property
    def score_mse(self) -> float:
        return self.report.mean["score_mse"]


def held_out(world: World) -> list[int]:
    return list(range(N_TRAIN, world.n_queries))


def run_unified(world: World, seed: int, forward_weight: float = 0.5, steps: int = 2000) -> RunResult:
    cfg = standard_config(seed, steps=steps, weights=replace(LossWeights(), forward=forward_weight))
    tte, lt, log = fit(world, cfg)
    rep = evaluate_system(RankingSystem("lt-ttd", tte, lt), world, held_out(world), k=cfg.k)
    return RunResult("lt-ttd", seed, forward_weight, rep, log.totals())


def run_cascade(world: World, seed: int, steps: int = 2000) -> RunResult:
    cfg = standard_config(seed, steps=steps)
    model = train_disjoint(world, cfg)
    rep = evaluate_system(RankingSystem("cascade", model.l1, model.l2), world, held_out(world), k=cfg.k)
    return RunResult("cascade", seed, 0.0, rep, model.log.totals())


def decile_medians(totals: np.ndarray) -> tuple[float, float]:
    n = max(1, len(totals) // 10)
    return float(np.median(totals[:n])), float(np.median(totals[-n:]))


def loss_slope(totals: np.ndarray) -> float:
    return float(np.polyfit(np.arange(len(totals)), totals, 1)[0])
