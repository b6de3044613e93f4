"""Listwise transformer that rescores a slate of candidates jointly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tte import uniform_init


@dataclass
class CandidateSlate:
    query_id: int
    item_ids: np.ndarray
    tte_scores: np.ndarray
    e_q: np.ndarray | None = None
    r_q: np.ndarray | None = None
    e_items: np.ndarray | None = None
    r_items: np.ndarray | None = None
    lt_scores: np.ndarray | None = None
    grades: np.ndarray | None = None

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.tte_scores = np.asarray(self.tte_scores, dtype=np.float64)
        if self.item_ids.size < 1:
            raise ValueError("a slate needs at least one candidate")
        if np.unique(self.item_ids).size != self.item_ids.size:
            raise ValueError("slate item ids must be distinct")
        if self.tte_scores.shape != self.item_ids.shape:
            raise ValueError("one tte score per candidate is required")

    @property
    def k(self) -> int:
        return int(self.item_ids.size)

    def permuted(self, perm: np.ndarray) -> "CandidateSlate":
        pick = lambda a: None if a is None else np.asarray(a)[perm]
        return CandidateSlate(
            self.query_id,
            self.item_ids[perm],
            self.tte_scores[perm],
            self.e_q,
            self.r_q,
            pick(self.e_items),
            pick(self.r_items),
            pick(self.lt_scores),
            pick(self.grades),
        )


@dataclass(frozen=True)
class LTConfig:
    d: int = 32
    d_r: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128

    @property
    def d_in(self) -> int:
        return 2 * self.d + 2 * self.d_r + 1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


class LTModel:
    """Input projection, pre-norm encoder layers, linear scoring head, alignment map."""

    def __init__(self, cfg: LTConfig, rng: np.random.Generator):
        self.cfg = cfg
        p: dict[str, Tensor] = {}
        dm = cfg.d_model

        def new(name, shape, fan_in):
            p[name] = Tensor(uniform_init(rng, shape, fan_in), requires_grad=True, name=name)

        def const(name, shape, value):
            p[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)

        new("in.w", (cfg.d_in, dm), cfg.d_in)
        const("in.b", (dm,), 0.0)
        for layer in range(cfg.n_layers):
            pre = f"l{layer}."
            const(pre + "ln1.g", (dm,), 1.0)
            const(pre + "ln1.b", (dm,), 0.0)
            for m in ("wq", "wk", "wv", "wo"):
                new(pre + m, (dm, dm), dm)
            const(pre + "ln2.g", (dm,), 1.0)
            const(pre + "ln2.b", (dm,), 0.0)
            new(pre + "ff.w1", (dm, cfg.d_ff), dm)
            const(pre + "ff.b1", (cfg.d_ff,), 0.0)
            new(pre + "ff.w2", (cfg.d_ff, dm), cfg.d_ff)
            const(pre + "ff.b2", (dm,), 0.0)
        new("head.w", (dm,), dm)
        const("head.b", (), 0.0)
        new("align.W", (cfg.d, dm), dm)
        self.params = p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


def positional_encoding(k: int, dim: int) -> np.ndarray:
    """Sinusoidal table indexed by slate rank 0..k-1."""
    pos = np.arange(k)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def assemble_inputs(slate: CandidateSlate) -> np.ndarray:
    """Rows ``[e_q; e_item; r_q; r_item; tte_score]``, one per candidate."""
    for name in ("e_q", "r_q", "e_items", "r_items"):
        if getattr(slate, name) is None:
            raise ValueError(f"slate is missing {name}")
    k = slate.k
    return np.concatenate(
        [
            np.tile(slate.e_q, (k, 1)),
            slate.e_items,
            np.tile(slate.r_q, (k, 1)),
            slate.r_items,
            slate.tte_scores[:, None],
        ],
        axis=1,
    )


def assemble_tensor(e_q: Tensor, e_items: Tensor, r_q: Tensor, r_items: Tensor, tte: Tensor) -> Tensor:
    """Batched, differentiable form of :func:`assemble_inputs`.

    Shapes: ``e_q (B, d)``, ``e_items (B, k, d)``, ``r_q (B, d_r)``,
    ``r_items (B, k, d_r)``, ``tte (B, k)``; result ``(B, k, 2d + 2d_r + 1)``.
    """
    k = e_items.shape[1]
    b = e_items.shape[0]
    return ad.concat(
        [ad.expand(e_q, 1, k), e_items, ad.expand(r_q, 1, k), r_items, ad.reshape(tte, (b, k, 1))],
        axis=-1,
    )


@dataclass
class LTOutput:
    scores: Tensor  # (B, k)
    z: Tensor  # (B, k, d_model), final layer states
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, (B, H, k, k)


def lt_forward_tensor(model: LTModel, x: Tensor, positional: bool = False) -> LTOutput:
    """Run the transformer over a batch of assembled slates ``x (B, k, d_in)``."""
    cfg = model.cfg
    p = model.params
    if x.ndim != 3 or x.shape[-1] != cfg.d_in:
        raise ad.ShapeError(f"lt_forward: expected (B, k, {cfg.d_in}) input, got {x.shape}")
    b, k, _ = x.shape
    if k == 0:
        raise ValueError("lt_forward: empty slate")
    if positional:
        x = x + positional_encoding(k, cfg.d_in)
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    z = x @ p["in.w"] + p["in.b"]
    attn_maps = []
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        u = ad.layer_norm(z, p[pre + "ln1.g"], p[pre + "ln1.b"])

        def heads(t):
            return ad.transpose(ad.reshape(t, (b, k, h, dh)), (0, 2, 1, 3))

        q = heads(u @ p[pre + "wq"])
        kk = heads(u @ p[pre + "wk"])
        v = heads(u @ p[pre + "wv"])
        att = ad.softmax(q @ ad.transpose(kk, (0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        attn_maps.append(att.data)
        mixed = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (b, k, cfg.d_model))
        z = z + mixed @ p[pre + "wo"]
        u = ad.layer_norm(z, p[pre + "ln2.g"], p[pre + "ln2.b"])
        z = z + ad.tanh(u @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    scores = z @ p["head.w"] + p["head.b"]
    return LTOutput(scores, z, attn_maps)


def lt_forward(model: LTModel, slate: CandidateSlate, positional_encoding: bool = False) -> np.ndarray:
    """LT scores for one slate (no graph recorded)."""
    with ad.no_grad():
        x = Tensor(assemble_inputs(slate)[None])
        out = lt_forward_tensor(model, x, positional_encoding)
    return out.scores.data[0].copy()


def lt_forward_full(model: LTModel, slate: CandidateSlate, positional_encoding: bool = False) -> LTOutput:
    with ad.no_grad():
        return lt_forward_tensor(model, Tensor(assemble_inputs(slate)[None]), positional_encoding)
