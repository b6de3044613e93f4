"""Wall-time scaling of the listwise transformer in k and of exact retrieval in N."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import curve_fit

from . import autodiff as ad
from .autodiff import Tensor
from .listwise import LTConfig, LTModel, lt_forward_tensor
from .metrics import cost_profile, measured_lt_macs
from .optim import make_rng

BENCH_SCHEMA_VERSION = 1


def _interleaved_best(calls: Sequence, repeats: int) -> np.ndarray:
    """Minimum wall time of each call over ``repeats`` rounds.

    Every round runs all calls once, so a transient slowdown of the machine
    hits scattered grid points instead of one whole block of the grid.
    """
    best = np.full(len(calls), np.inf)
    for fn in calls:
        fn()
    for _ in range(repeats):
        for j, fn in enumerate(calls):
            t0 = time.perf_counter()
            fn()
            best[j] = min(best[j], time.perf_counter() - t0)
    return best


def time_lt(model: LTModel, ks: Sequence[int], repeats: int = 15, work: int = 2048, seed: int = 0) -> np.ndarray:
    """Seconds per slate of one no-grad forward pass, for each slate size.

    A batch of ``work // k`` slates per call keeps the per-call overhead small
    relative to the work.
    """
    rng = make_rng(seed, 1)
    calls, sizes = [], []
    for k in map(int, ks):
        b = max(1, work // k)
        x = Tensor(rng.standard_normal((b, k, model.cfg.d_in)))

        def call(x=x):
            with ad.no_grad():
                lt_forward_tensor(model, x)

        calls.append(call)
        sizes.append(b)
    return _interleaved_best(calls, repeats) / np.array(sizes)


def blocked_topk(queries: np.ndarray, emb: np.ndarray, k: int, block: int = 4096) -> np.ndarray:
    """Exact top-k ids per query from a block-wise linear scan of ``emb``."""
    best_s = np.full((queries.shape[0], 0), -np.inf)
    best_i = np.zeros((queries.shape[0], 0), dtype=np.int64)
    for start in range(0, emb.shape[0], block):
        s = queries @ emb[start:start + block].T
        ids = np.broadcast_to(np.arange(start, start + s.shape[1]), s.shape)
        s = np.concatenate([best_s, s], axis=1)
        ids = np.concatenate([best_i, ids], axis=1)
        if s.shape[1] > k:
            keep = np.argpartition(-s, k - 1, axis=1)[:, :k]
            s = np.take_along_axis(s, keep, axis=1)
            ids = np.take_along_axis(ids, keep, axis=1)
        best_s, best_i = s, ids
    order = np.lexsort((best_i, -best_s), axis=1)
    return np.take_along_axis(best_i, order, axis=1)


def time_retrieval(
    ns: Sequence[int], d: int = 32, k: int = 50, n_queries: int = 64, repeats: int = 15, seed: int = 0
) -> np.ndarray:
    """Seconds per query of an exact blocked scan, for each corpus size."""
    rng = make_rng(seed, 2)
    q = rng.standard_normal((n_queries, d))
    calls = []
    for n in ns:
        emb = rng.standard_normal((int(n), d))
        calls.append(lambda emb=emb, n=int(n): blocked_topk(q, emb, min(k, n)))
    return _interleaved_best(calls, repeats) / n_queries


def fit_power_plus_linear(ks: np.ndarray, ts: np.ndarray) -> float:
    """Exponent ``p`` of ``t = a k^p + b k``; the linear term absorbs the per-candidate projections.

    Residuals are weighted relative to ``t`` so the small-k points count.
    """
    ks, ts = np.asarray(ks, dtype=float), np.asarray(ts, dtype=float)
    f = lambda k, a, p, b: a * k**p + b * k
    p0 = [ts[-1] / ks[-1] ** 2, 2.0, ts[0] / ks[0]]
    popt, _ = curve_fit(f, ks, ts, p0=p0, sigma=ts, bounds=([0.0, 0.5, 0.0], [np.inf, 4.0, np.inf]), maxfev=20000)
    return float(popt[1])


def lt_exponent(model: LTModel, ks: Sequence[int], rounds: int = 5, repeats: int = 15, seed: int = 0) -> tuple[float, np.ndarray]:
    """Median over ``rounds`` of the fitted LT exponent, and the median timings.

    Each round also times k = 1 and k = 2; ``2 t(1) - t(2)`` estimates the
    per-slate constant overhead, which is subtracted before fitting.
    """
    grid = np.array([1, 2, *ks], dtype=float)
    exps, times = [], []
    for r in range(rounds):
        t = time_lt(model, grid.astype(int), repeats=repeats, seed=seed + r)
        c = max(0.0, 2.0 * t[0] - t[1])
        exps.append(fit_power_plus_linear(grid[2:], t[2:] - c))
        times.append(t[2:])
    return float(np.median(exps)), np.median(np.array(times), axis=0)


def two_term_r2(ks: np.ndarray, ts: np.ndarray) -> float:
    """Coefficient of determination of the least-squares fit ``t = a k^2 + b k``."""
    ks, ts = np.asarray(ks, dtype=float), np.asarray(ts, dtype=float)
    a = np.stack([ks**2, ks], axis=1)
    coef = np.linalg.lstsq(a, ts, rcond=None)[0]
    resid = ts - a @ coef
    return float(1.0 - resid @ resid / ((ts - ts.mean()) @ (ts - ts.mean())))


def loglog_slope(xs: np.ndarray, ts: np.ndarray) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ts, float)), 1)[0])


def retrieval_exponent(ns: Sequence[int], d: int = 32, k: int = 50, repeats: int = 15, seed: int = 0) -> tuple[float, np.ndarray]:
    """Log-log slope of scan time in N after removing the N-independent overhead.

    The overhead (final sort of the k winners, call setup) is extrapolated as
    ``2 t(n0) - t(2 n0)`` from two tiny corpora with ``n0 >= k``.
    """
    n0 = max(64, k)
    t = time_retrieval([n0, 2 * n0, *ns], d=d, k=k, repeats=repeats, seed=seed)
    c = max(0.0, 2.0 * t[0] - t[1])
    return loglog_slope(np.array(ns), t[2:] - c), t[2:]


@dataclass
class BenchmarkReport:
    ks: list[int]
    lt_seconds: list[float]
    lt_exponent: float
    lt_two_term_r2: float
    ns: list[int]
    retrieval_seconds: list[float]
    retrieval_exponent: float
    flop_model: list[int]
    flop_counted: list[int]
    schema_version: int = BENCH_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def run_benchmark(
    ks: Sequence[int] = (16, 32, 64, 128, 256),
    ns: Sequence[int] = (1_000, 10_000, 100_000),
    cfg: LTConfig = LTConfig(),
    seed: int = 0,
    repeats: int = 15,
    rounds: int = 7,
) -> BenchmarkReport:
    model = LTModel(cfg, make_rng(seed, 0))
    lt_exp, lt_t = lt_exponent(model, ks, rounds=rounds, repeats=repeats, seed=seed)
    ret_exp, ret_t = retrieval_exponent(ns, d=cfg.d, repeats=repeats, seed=seed)
    model_flops = [
        cost_profile("lt-ttd", 1, cfg.d, k, cfg.d_model, cfg.n_layers, cfg.d_r, cfg.d_ff).lt for k in ks
    ]
    counted = [measured_lt_macs(model, k) for k in ks]
    return BenchmarkReport(
        list(map(int, ks)),
        lt_t.tolist(),
        lt_exp,
        two_term_r2(np.array(ks), lt_t),
        list(map(int, ns)),
        ret_t.tolist(),
        ret_exp,
        model_flops,
        counted,
    )
