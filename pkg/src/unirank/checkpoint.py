"""Checkpoint files and atomic output writes.

Layout: an 8-byte little-endian header length, a compact JSON header with
sorted keys, then each tensor as raw little-endian float64 in header order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError
from .cascade import CascadeState
from .listwise import LTModel
from .optim import AdamState
from .trainer import TrainingConfig, TrainState, init_models
from .tte import TTEModel
from .world import World

CHECKPOINT_VERSION = 1
_LEN = struct.Struct("<Q")


class DimensionMismatch(ShapeError):
    """Checkpoint and world (or config) disagree on a dimension."""


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class Checkpoint:
    system: str
    step: int
    config: dict
    rng: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def encode(ck: Checkpoint) -> bytes:
    header = {
        "format_version": ck.version,
        "system": ck.system,
        "step": ck.step,
        "config": ck.config,
        "rng": ck.rng,
        "meta": ck.meta,
        "tensors": [[name, list(arr.shape)] for name, arr in ck.tensors.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    parts = [_LEN.pack(len(head)), head]
    for arr in ck.tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> Checkpoint:
    if len(data) < _LEN.size:
        raise ValueError("checkpoint truncated")
    (n,) = _LEN.unpack_from(data, 0)
    header = json.loads(data[_LEN.size:_LEN.size + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    off = _LEN.size + n
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = off + 8 * count
        if end > len(data):
            raise ValueError("checkpoint truncated")
        tensors[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        off = end
    if off != len(data):
        raise ValueError("trailing bytes after checkpoint payload")
    return Checkpoint(header["system"], header["step"], header["config"], header["rng"], tensors, header["meta"])


def save(path: str | Path, ck: Checkpoint) -> None:
    atomic_write(path, encode(ck))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training state <-> checkpoint


def _adam_meta(a: AdamState) -> dict:
    return dict(lr=a.lr, beta1=a.beta1, beta2=a.beta2, eps=a.eps, step=a.step)


def _put_model(tensors: dict, prefix: str, model) -> None:
    for name, p in model.params.items():
        tensors[f"{prefix}.{name}"] = p.data


def _put_adam(tensors: dict, tag: str, names: list[str], a: AdamState) -> None:
    for name, m in zip(names, a.m):
        tensors[f"{tag}.m.{name}"] = m
    for name, v in zip(names, a.v):
        tensors[f"{tag}.v.{name}"] = v


def from_state(state, config: dict) -> Checkpoint:
    """Snapshot a unified or cascade training state."""
    tensors: dict[str, np.ndarray] = {}
    if isinstance(state, CascadeState):
        system = "cascade"
        _put_model(tensors, "l1", state.l1)
        _put_model(tensors, "l2", state.l2)
        _put_adam(tensors, "adam1", [f"l1.{n}" for n in state.l1.params], state.adam1)
        _put_adam(tensors, "adam2", [f"l2.{n}" for n in state.l2.params], state.adam2)
        meta = dict(adam1=_adam_meta(state.adam1), adam2=_adam_meta(state.adam2), phase1_steps=state.phase1_steps)
    else:
        system = "lt-ttd"
        _put_model(tensors, "tte", state.tte)
        _put_model(tensors, "lt", state.lt)
        names = [f"tte.{n}" for n in state.tte.params] + [f"lt.{n}" for n in state.lt.params]
        _put_adam(tensors, "adam", names, state.adam)
        meta = dict(adam=_adam_meta(state.adam))
    meta["has_neg_pool"] = state.neg_pool is not None
    if state.neg_pool is not None:
        tensors["neg_pool"] = state.neg_pool.astype(np.float64)
    return Checkpoint(system, int(state.step), config, state.rng.bit_generator.state, tensors, meta)


def _load_model(model, prefix: str, tensors: dict) -> None:
    for name, p in model.params.items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise DimensionMismatch(f"checkpoint lacks tensor {key}")
        arr = tensors[key]
        if arr.shape != p.data.shape:
            raise DimensionMismatch(f"{key}: checkpoint shape {arr.shape} vs model shape {p.data.shape}")
        p.data = arr.copy()


def _load_adam(meta: dict, tag: str, names: list[str], tensors: dict) -> AdamState:
    a = AdamState(**meta)
    a.m = [tensors[f"{tag}.m.{n}"].copy() for n in names]
    a.v = [tensors[f"{tag}.v.{n}"].copy() for n in names]
    return a


def _rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def check_world(ck: Checkpoint, world: World) -> None:
    """Raise :class:`DimensionMismatch` if the checkpoint cannot run on ``world``."""
    key = "tte.tok_emb" if ck.system == "lt-ttd" else "l1.tok_emb"
    vocab = ck.tensors[key].shape[0]
    if vocab != world.vocab_size:
        raise DimensionMismatch(f"checkpoint vocab_size {vocab} vs world vocab_size {world.vocab_size}")
    pool = ck.tensors.get("neg_pool")
    if pool is not None and pool.shape[0] != world.n_queries:
        raise DimensionMismatch(f"checkpoint covers {pool.shape[0]} queries vs world n_queries {world.n_queries}")


def to_state(ck: Checkpoint, world: World, training: TrainingConfig):
    """Rebuild a resumable training state (unified or cascade)."""
    check_world(ck, world)
    tte, lt = init_models(world, training)
    pool = ck.tensors["neg_pool"].astype(np.int64) if ck.meta.get("has_neg_pool") else None
    if ck.system == "cascade":
        _load_model(tte, "l1", ck.tensors)
        _load_model(lt, "l2", ck.tensors)
        st = CascadeState(
            tte,
            lt,
            _load_adam(ck.meta["adam1"], "adam1", [f"l1.{n}" for n in tte.params], ck.tensors),
            _load_adam(ck.meta["adam2"], "adam2", [f"l2.{n}" for n in lt.params], ck.tensors),
            _rng(ck.rng),
            phase1_steps=int(ck.meta["phase1_steps"]),
            step=ck.step,
            neg_pool=pool,
        )
        return st
    _load_model(tte, "tte", ck.tensors)
    _load_model(lt, "lt", ck.tensors)
    names = [f"tte.{n}" for n in tte.params] + [f"lt.{n}" for n in lt.params]
    adam = _load_adam(ck.meta["adam"], "adam", names, ck.tensors)
    return TrainState(tte, lt, adam, _rng(ck.rng), step=ck.step, neg_pool=pool)


def models(ck: Checkpoint, world: World, training: TrainingConfig) -> tuple[TTEModel, LTModel]:
    st = to_state(ck, world, training)
    return st.tte if ck.system == "lt-ttd" else st.l1, st.lt if ck.system == "lt-ttd" else st.l2
