"""Executable checks of the theoretical claims that can be tested exactly or directionally."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import softmax_np
from .cascade import QuadraticToy, joint_loss_comparison, random_toy
from .metrics import UPQEParams, upqe_value
from .optim import make_rng

THEOREMS_SCHEMA_VERSION = 1


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    expected_failure: bool = False
    reason: str = ""

    def __post_init__(self):
        # comparisons of numpy scalars yield numpy bools, which JSON rejects
        self.passed = bool(self.passed)

    @property
    def ok(self) -> bool:
        """Counts towards the suite verdict: a pass, or a documented known-false statement."""
        return self.passed or self.expected_failure


@dataclass
class SuiteResult:
    results: list[PropertyResult] = field(default_factory=list)
    schema_version: int = THEOREMS_SCHEMA_VERSION

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.results)

    def failing(self) -> list[str]:
        return [r.name for r in self.results if not r.ok]

    def to_dict(self) -> dict:
        return dict(
            schema_version=self.schema_version,
            passed=self.passed,
            results=[asdict(r) for r in self.results],
        )


# ---------------------------------------------------------------------------
# convex toy


def lemma_random(instances: int = 100, seed: int = 0) -> PropertyResult:
    rng = make_rng(seed, 11)
    worst = -math.inf
    for _ in range(instances):
        toy = random_toy(rng, n=int(rng.integers(2, 9)))
        j, d = joint_loss_comparison(toy)
        worst = max(worst, j - d)
    return PropertyResult(
        "lemma_joint_le_disjoint", worst <= 1e-12, f"max(joint - disjoint) = {worst:.3e} over {instances} toys"
    )


def lemma_aligned(seed: int = 0) -> PropertyResult:
    rng = make_rng(seed, 12)
    worst = 0.0
    for _ in range(20):
        base = random_toy(rng, n=5)
        toy = QuadraticToy(base.A, base.A, base.a, base.a, base.split)
        j, d = joint_loss_comparison(toy)
        worst = max(worst, abs(j - d))
    return PropertyResult("lemma_aligned_equality", worst <= 1e-10, f"max |joint - disjoint| = {worst:.3e}")


def lemma_orthogonal() -> PropertyResult:
    n = 4
    a = np.zeros(n)
    a[0] = 1.0
    b = np.zeros(n)
    b[n - 1] = 1.0
    coupling = np.eye(n) + 0.4 * (np.ones((n, n)) - np.eye(n))
    toy = QuadraticToy(coupling, coupling, a, b, split=n // 2)
    j, d = joint_loss_comparison(toy)
    return PropertyResult("lemma_orthogonal_strict", j < d, f"joint {j:.6f} < disjoint {d:.6f}")


# ---------------------------------------------------------------------------
# UPQE

UPQEFn = Callable[..., float]


def upqe_convergence(fn: UPQEFn = upqe_value) -> PropertyResult:
    bad = []
    for gamma in (0.5, 1.0, 2.0):
        for ndcg_c in np.linspace(0.05, 1.0, 20):
            for n_rel in (1, 3, 10):
                v = fn(1.0, float(ndcg_c), 0, n_rel, 1.0, 1.0, UPQEParams(1.0, 1.0, gamma))
                if v < gamma:
                    bad.append((gamma, float(ndcg_c), n_rel, v))
    return PropertyResult("upqe_convergence", not bad, f"{len(bad)} violations" + (f", first {bad[0]}" if bad else ""))


def upqe_monotone(fn: UPQEFn = upqe_value) -> PropertyResult:
    bad = []
    for alpha in (0.25, 0.5, 1.0, 2.0, 3.0):
        for n_rel in range(1, 11):
            vals = [fn(0.7, 0.6, e, n_rel, 1.0, 1.5, UPQEParams(alpha, 1.0, 1.0)) for e in range(n_rel + 1)]
            if not all(x > y for x, y in zip(vals, vals[1:])):
                bad.append((alpha, n_rel))
    return PropertyResult("upqe_error_weight_monotone", not bad, f"{len(bad)} non-decreasing grids {bad[:3]}")


def upqe_indifference(fn: UPQEFn = upqe_value, seed: int = 0) -> PropertyResult:
    rng = make_rng(seed, 13)
    worst = 0.0
    for _ in range(200):
        beta = float(rng.uniform(0.2, 3.0))
        c1, c2 = rng.uniform(0.5, 4.0, size=2)
        n2 = float(rng.uniform(0.1, 0.5))
        n1 = n2 * (c1 / c2) ** beta
        p = UPQEParams(1.0, beta, 1.0)
        u1 = fn(n1, 0.5, 1, 4, float(c1), 1.0, p)
        u2 = fn(n2, 0.5, 1, 4, float(c2), 1.0, p)
        worst = max(worst, abs(u1 - u2))
    return PropertyResult("upqe_quality_efficiency_indifference", worst <= 1e-9, f"max |UPQE_1 - UPQE_2| = {worst:.3e}")


def _penalty_drops(alpha: float, n_rel: int) -> np.ndarray:
    e = np.arange(n_rel + 1)
    pen = (1.0 - e / n_rel) ** alpha
    return pen[:-1] - pen[1:]


def penalty_steepening(alpha: float) -> PropertyResult:
    """Drop of the propagation factor from E to E+1 is non-decreasing in E."""
    bad = [n for n in range(2, 21) if np.any(np.diff(_penalty_drops(alpha, n)) < -1e-15)]
    res = PropertyResult(
        f"penalty_steepening_alpha_{alpha:g}",
        not bad,
        f"non-steepening for |R| in {bad[:5]}{'...' if len(bad) > 5 else ''}" if bad else "steepening on |R| = 2..20",
    )
    if alpha > 1.0:
        res.expected_failure = True
        res.reason = (
            "d/dE (1 - E/|R|)^alpha = -(alpha/|R|)(1 - E/|R|)^(alpha-1); for alpha > 1 its magnitude "
            "shrinks as E grows, so successive drops decrease. The statement holds only for alpha < 1."
        )
    return res


def pinsker(pairs: int = 1000, seed: int = 0) -> PropertyResult:
    rng = make_rng(seed, 14)
    worst = math.inf
    for _ in range(pairs):
        n = int(rng.integers(2, 12))
        p = softmax_np(rng.normal(scale=2.0, size=n))
        q = softmax_np(rng.normal(scale=2.0, size=n))
        kl = float(np.sum(p * (np.log(p) - np.log(q))))
        worst = min(worst, kl - 0.5 * np.abs(p - q).sum() ** 2)
    return PropertyResult("pinsker", worst >= -1e-12, f"min(KL - 0.5 ||P - Q||_1^2) = {worst:.3e}")


def run_suite(
    instances: int = 100,
    seeds: tuple[int, ...] = (0, 1, 2),
    upqe_fn: UPQEFn = upqe_value,
    with_training: bool = True,
) -> SuiteResult:
    """All checks; ``upqe_fn`` lets a caller inject a faulty UPQE to see the suite catch it."""
    suite = SuiteResult()
    for s in seeds:
        suite.results.append(lemma_random(instances, s))
    suite.results += [
        lemma_aligned(seeds[0]),
        lemma_orthogonal(),
        upqe_convergence(upqe_fn),
        upqe_monotone(upqe_fn),
        upqe_indifference(upqe_fn, seeds[0]),
        penalty_steepening(0.5),
        penalty_steepening(2.0),
        pinsker(1000, seeds[0]),
    ]
    if with_training:
        from .ablation import distillation_monotonicity

        suite.results.append(distillation_monotonicity(seeds))
    return suite
