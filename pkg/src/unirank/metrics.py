"""Ranking metrics, error propagation, UPQE and the flop cost model."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .listwise import LTConfig, LTModel, assemble_tensor, lt_forward_tensor
from .tte import TTEModel, build_index, encode_queries, topk_indices
from .world import World, ideal_ranking, performance_gap

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# per-query metrics


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def dcg(grades: Sequence[int] | np.ndarray) -> float:
    g = np.asarray(grades, dtype=float)
    return float(((2.0**g - 1.0) * _discounts(g.size)).sum())


def ndcg_at(ranking: Sequence[int] | np.ndarray, world: World, query: int, cutoff: int) -> float:
    """DCG of the first ``cutoff`` ranked items over the corpus-ideal DCG at that cutoff.

    A query without relevant items scores 1.0 (vacuous).
    """
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    g = world.grades(query)
    ideal = dcg(np.sort(g)[::-1][:cutoff])
    if ideal == 0.0:
        log.info("query %d has no relevant items; NDCG defined as 1", query)
        return 1.0
    ranked = np.asarray(ranking, dtype=np.int64)[:cutoff]
    return dcg(g[ranked]) / ideal


def recall(world: World, query: int, retrieved_ids: Sequence[int] | np.ndarray) -> float:
    rel = world.relevant(query)
    if rel.size == 0:
        return 1.0
    return float(np.isin(rel, np.asarray(retrieved_ids, dtype=np.int64)).mean())


def error_propagation(world: World, query: int, retrieved_ids: Sequence[int] | np.ndarray) -> int:
    """Relevant items that retrieval left out."""
    rel = world.relevant(query)
    return int(np.count_nonzero(~np.isin(rel, np.asarray(retrieved_ids, dtype=np.int64))))


# ---------------------------------------------------------------------------
# UPQE


@dataclass(frozen=True)
class UPQEParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError(f"UPQE parameters must be positive: {self}")


class UndefinedUPQE(ValueError):
    """The cascade NDCG is zero, so the relative-quality ratio is undefined."""


def upqe_value(
    ndcg_u: float,
    ndcg_c: float,
    e_prop: float,
    n_relevant: int,
    c_u: float,
    c_c: float,
    params: UPQEParams = UPQEParams(),
) -> float:
    """gamma * (NDCG_u / NDCG_c) * (1 - E / |R|)^alpha * (C_c / C_u)^beta."""
    if ndcg_c == 0.0:
        raise UndefinedUPQE("cascade NDCG is 0")
    if c_u <= 0 or c_c <= 0:
        raise ValueError("costs must be positive")
    if n_relevant <= 0:
        raise ValueError("UPQE needs at least one relevant item")
    if not 0 <= e_prop <= n_relevant:
        raise ValueError(f"E_propagation={e_prop} outside [0, {n_relevant}]")
    penalty = (1.0 - e_prop / n_relevant) ** params.alpha
    return params.gamma * (ndcg_u / ndcg_c) * penalty * (c_c / c_u) ** params.beta


@dataclass(frozen=True)
class UPQEInput:
    ndcg_u: float
    ndcg_c: float
    e_prop: int
    n_relevant: int
    c_u: float
    c_c: float


@dataclass
class UPQEResult:
    per_query: list  # float, or None where excluded
    mean: float
    excluded: int


def upqe(q_metrics: Sequence[UPQEInput], params: UPQEParams = UPQEParams()) -> UPQEResult:
    """Per-query UPQE; queries with zero cascade NDCG or no relevant items are excluded and counted."""
    vals: list = []
    for m in q_metrics:
        if m.ndcg_c == 0.0 or m.n_relevant == 0:
            vals.append(None)
            continue
        vals.append(upqe_value(m.ndcg_u, m.ndcg_c, m.e_prop, m.n_relevant, m.c_u, m.c_c, params))
    kept = [v for v in vals if v is not None]
    excluded = len(vals) - len(kept)
    if excluded:
        log.info("UPQE undefined for %d queries; excluded", excluded)
    return UPQEResult(vals, float(np.mean(kept)) if kept else float("nan"), excluded)


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostProfile:
    """Multiply-add counts per query. ``lt`` includes ``attention``."""

    retrieval: int
    attention: int
    lt: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def cost_profile(
    system: str,
    n_items: int,
    d: int,
    k: int,
    d_model: int,
    n_layers: int,
    d_r: int = 8,
    d_ff: int | None = None,
) -> CostProfile:
    """Closed-form multiply-adds of exact retrieval plus one listwise pass.

    Both systems run the same retrieval and transformer shapes, so ``system``
    only labels the profile.
    """
    if system not in ("lt-ttd", "cascade", "oracle"):
        raise ValueError(f"unknown system {system!r}")
    if min(n_items, d, k, d_model, n_layers) < 1:
        raise ValueError("dimensions must be positive")
    d_ff = 2 * d_model if d_ff is None else d_ff
    d_in = 2 * d + 2 * d_r + 1
    retrieval = n_items * d
    attention = n_layers * 2 * k * k * d_model
    per_layer_dense = 4 * k * d_model * d_model + 2 * k * d_model * d_ff
    lt = k * d_in * d_model + n_layers * per_layer_dense + attention + k * d_model
    return CostProfile(retrieval, attention, lt, retrieval + lt)


def measured_lt_macs(model: LTModel, k: int) -> int:
    """Multiply-adds recorded by the autodiff counter over one forward pass on a k-slate."""
    x = Tensor(np.zeros((1, k, model.cfg.d_in)))
    with ad.no_grad(), ad.count_flops() as counter:
        lt_forward_tensor(model, x)
    return counter.macs


# ---------------------------------------------------------------------------
# system evaluation


@dataclass
class RankingSystem:
    """Retrieve with the encoder, rerank the top-k slate with the transformer."""

    tag: str
    tte: TTEModel
    lt: LTModel
    pe_on: bool = False


@dataclass
class OracleSystem:
    """Ranks the full corpus by true grade (ties by id)."""

    tag: str = "oracle"


def run_system(system, world: World, query_ids: Sequence[int], k: int) -> list[dict]:
    """Per query: retrieved ids, final ranking, encoder and transformer scores of the slate."""
    query_ids = np.asarray(query_ids, dtype=np.int64)
    out = []
    if isinstance(system, OracleSystem):
        for q in query_ids:
            rank = ideal_ranking(world, int(q))[:k]
            out.append(dict(query=int(q), retrieved=rank, ranking=rank, s_tte=None, s_lt=None))
        return out
    index = build_index(system.tte, world)
    e_q, r_q = encode_queries(system.tte, world, query_ids)
    scores = e_q @ index.emb.T
    ids = np.stack([topk_indices(scores[r], k) for r in range(query_ids.size)])
    s_tte = np.take_along_axis(scores, ids, axis=1)
    with ad.no_grad():
        x = assemble_tensor(Tensor(e_q), Tensor(index.emb[ids]), Tensor(r_q), Tensor(index.res[ids]), Tensor(s_tte))
        s_lt = lt_forward_tensor(system.lt, x, system.pe_on).scores.data
    for r, q in enumerate(query_ids):
        order = np.lexsort((ids[r], -s_lt[r]))
        out.append(dict(query=int(q), retrieved=ids[r], ranking=ids[r][order], s_tte=s_tte[r], s_lt=s_lt[r]))
    return out


def world_signature(world: World) -> dict:
    """Everything that determines the world, as stored in its JSON file."""
    return world.to_json()


@dataclass
class MetricsReport:
    system: str
    k: int
    cutoffs: list[int]
    world: dict
    per_query: list[dict]
    mean: dict
    cost: CostProfile
    vacuous_queries: int = 0
    notes: list[str] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def columns(self) -> list[str]:
        return ["query_id", *[f"ndcg@{c}" for c in self.cutoffs], "recall", "e_prop", "n_relevant", "gap", "score_mse"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost"] = self.cost.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')}")
        d["cost"] = CostProfile(**d["cost"])
        return cls(**d)

    def to_csv(self) -> str:
        return _rows_to_csv(["schema_version", *self.columns], self.per_query, self.mean, self.schema_version)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _rows_to_csv(columns: list[str], rows: list[dict], summary: dict, version: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([version] + [_fmt(row.get(c)) for c in columns[1:]])
    w.writerow([version] + [_fmt(summary.get(c)) for c in columns[1:]])
    return buf.getvalue()


def evaluate_system(
    system,
    world: World,
    query_ids: Sequence[int],
    cutoffs: Sequence[int] = (1, 5, 10),
    k: int = 50,
    lt_cfg: LTConfig | None = None,
) -> MetricsReport:
    """Run retrieval and reranking on ``query_ids`` and score every query."""
    cutoffs = sorted({int(c) for c in cutoffs} | {k})
    runs = run_system(system, world, query_ids, k)
    rows, vacuous = [], 0
    for r in runs:
        q = r["query"]
        n_rel = int(world.relevant(q).size)
        vacuous += n_rel == 0
        row = dict(query_id=q)
        for c in cutoffs:
            row[f"ndcg@{c}"] = ndcg_at(r["ranking"], world, q, c)
        row["recall"] = recall(world, q, r["retrieved"])
        row["e_prop"] = error_propagation(world, q, r["retrieved"])
        row["n_relevant"] = n_rel
        row["gap"] = performance_gap(world, q, r["retrieved"], "ndcg", cutoff=k).gap
        row["score_mse"] = None if r["s_lt"] is None else float(np.mean((r["s_tte"] - r["s_lt"]) ** 2))
        rows.append(row)
    mean = dict(query_id="mean")
    for key in rows[0] if rows else []:
        if key == "query_id":
            continue
        vals = [row[key] for row in rows if row[key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    if isinstance(system, OracleSystem):
        lt_cfg = lt_cfg or LTConfig()
    else:
        lt_cfg = system.lt.cfg
    cost = cost_profile(
        system.tag, world.n_items, lt_cfg.d, k, lt_cfg.d_model, lt_cfg.n_layers, lt_cfg.d_r, lt_cfg.d_ff
    )
    notes = [
        f"UPQE uses NDCG@{k} (slate size)",
        "inference slates are pure top-k; training slates of the unified system force all positives in",
    ]
    if system.tag == "cascade":
        notes.append("cascade trained with the same total step budget, split evenly between its two phases")
    return MetricsReport(system.tag, k, cutoffs, world_signature(world), rows, mean, cost, vacuous, notes)


# ---------------------------------------------------------------------------
# comparison


class WorldMismatch(ValueError):
    pass


@dataclass
class ComparisonReport:
    k: int
    params: dict
    world: dict
    per_query: list[dict]
    mean_upqe: float
    excluded: int
    delta_ndcg: dict  # unified minus cascade, per cutoff
    delta_e_prop: float
    cost_ratio: float  # C_cascade / C_unified
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    columns = ["query_id", "ndcg_u", "ndcg_c", "e_prop", "n_relevant", "upqe"]

    def to_csv(self) -> str:
        summary = dict(query_id="mean", upqe=self.mean_upqe)
        return _rows_to_csv(["schema_version", *self.columns], self.per_query, summary, self.schema_version)


def compare(unified: MetricsReport, cascade: MetricsReport, params: UPQEParams = UPQEParams()) -> ComparisonReport:
    """Per-query UPQE of the unified system against the cascade, on identical worlds and queries."""
    if unified.world != cascade.world:
        raise WorldMismatch(f"reports come from different worlds: {unified.world} vs {cascade.world}")
    qu = [r["query_id"] for r in unified.per_query]
    if qu != [r["query_id"] for r in cascade.per_query] or unified.k != cascade.k:
        raise WorldMismatch("reports cover different query sets or slate sizes")
    key = f"ndcg@{unified.k}"
    inputs = [
        UPQEInput(u[key], c[key], u["e_prop"], u["n_relevant"], unified.cost.total, cascade.cost.total)
        for u, c in zip(unified.per_query, cascade.per_query)
    ]
    res = upqe(inputs, params)
    rows = [
        dict(query_id=q, ndcg_u=i.ndcg_u, ndcg_c=i.ndcg_c, e_prop=i.e_prop, n_relevant=i.n_relevant, upqe=v)
        for q, i, v in zip(qu, inputs, res.per_query)
    ]
    shared = [c for c in unified.cutoffs if c in cascade.cutoffs]
    delta = {
        f"ndcg@{c}": float(np.mean([u[f"ndcg@{c}"] - v[f"ndcg@{c}"] for u, v in zip(unified.per_query, cascade.per_query)]))
        for c in shared
    }
    d_e = float(np.mean([u["e_prop"] - c["e_prop"] for u, c in zip(unified.per_query, cascade.per_query)]))
    return ComparisonReport(
        unified.k,
        asdict(params),
        unified.world,
        rows,
        res.mean,
        res.excluded,
        delta,
        d_e,
        cascade.cost.total / unified.cost.total,
    )


def paired_summary(comparisons: Sequence[ComparisonReport]) -> dict:
    """Across seed pairs: how often the unified system wins on NDCG@k and E_propagation."""
    key = f"ndcg@{comparisons[0].k}"
    dn = [c.delta_ndcg[key] for c in comparisons]
    de = [c.delta_e_prop for c in comparisons]
    return dict(
        pairs=len(comparisons),
        ndcg_wins=int(sum(x >= 0 for x in dn)),
        e_prop_wins=int(sum(x <= 0 for x in de)),
        median_delta_ndcg=float(np.median(dn)),
        median_delta_e_prop=float(np.median(de)),
        mean_upqe=[c.mean_upqe for c in comparisons],
    )


def is_finite_number(x) -> bool:
    return isinstance(x, (int, float)) and math.isfinite(x)
