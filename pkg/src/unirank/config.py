"""Run configuration: JSON defaults merged with a user override, strict about keys."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .metrics import UPQEParams
from .trainer import TrainingConfig
from .world import DEFAULT_GRADE_PROBS, World, generate_world

SYSTEMS = ("lt-ttd", "cascade", "both")


class ConfigError(ValueError):
    """Invalid, incomplete or unparseable configuration."""


def _training_defaults() -> dict:
    d = TrainingConfig().to_dict()
    d.pop("seed")
    return d


DEFAULTS: dict = {
    "seed": 0,
    "world": {
        "n_items": None,
        "n_queries": None,
        "vocab_size": 256,
        "latent_dim": 8,
        "grade_probs": list(DEFAULT_GRADE_PROBS),
        "noise": 0.05,
        "kappa": 8.0,
        "item_len": [4, 32],
        "query_len": [4, 16],
        "planted": [],
    },
    "training": _training_defaults(),
    "upqe": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "eval": {"cutoffs": [1, 5, 10]},
    "system": "lt-ttd",
    "checkpoint_every": 500,
    "benchmark": {
        "ks": [16, 32, 64, 128, 256],
        "ns": [1000, 10000, 100000],
        "repeats": 15,
    },
    "theorems": {"instances": 100, "seeds": [0, 1, 2]},
}

REQUIRED = (("world", "n_items"), ("world", "n_queries"))

# nested tables whose keys are free-form rather than schema-checked
_OPEN = {("training", "n_train_queries")}


def merge(base: dict, override: dict, path: tuple = ()) -> dict:
    """Recursive defaults-then-override merge; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and path + (key,) not in _OPEN:
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = merge(base[key], val, path + (key,))
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    raw: dict
    training: TrainingConfig
    upqe: UPQEParams
    cutoffs: list[int]
    system: str
    checkpoint_every: int
    benchmark: dict = field(default_factory=dict)
    theorems: dict = field(default_factory=dict)

    @property
    def world(self) -> dict:
        return self.raw["world"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def systems(self) -> list[str]:
        return ["lt-ttd", "cascade"] if self.system == "both" else [self.system]

    def require_world(self) -> None:
        for sec, key in REQUIRED:
            if self.raw[sec][key] is None:
                raise ConfigError(f"missing required config key '{sec}.{key}'")

    def make_world(self) -> World:
        self.require_world()
        w = self.world
        try:
            return generate_world(
                self.seed,
                int(w["n_items"]),
                int(w["n_queries"]),
                int(w["vocab_size"]),
                int(w["latent_dim"]),
                grade_probs=w["grade_probs"],
                noise=float(w["noise"]),
                kappa=float(w["kappa"]),
                item_len=tuple(w["item_len"]),
                query_len=tuple(w["query_len"]),
                planted=[tuple(p) for p in w["planted"]],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid world config: {exc}") from exc

    def held_out(self, world: World) -> list[int]:
        n = self.training.n_train_queries
        if n is None or n >= world.n_queries:
            return list(range(world.n_queries))
        return list(range(n, world.n_queries))

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)


def build(raw_override: dict | None = None, seed: int | None = None) -> RunConfig:
    """Merge ``raw_override`` over the defaults and validate."""
    raw = merge(DEFAULTS, raw_override or {})
    if seed is not None:
        raw["seed"] = int(seed)
    if raw["system"] not in SYSTEMS:
        raise ConfigError(f"system must be one of {SYSTEMS}, got {raw['system']!r}")
    n_q = raw["world"]["n_queries"]
    tr = dict(raw["training"])
    if tr["n_train_queries"] is None and n_q is not None:
        # two thirds train, the rest held out
        tr["n_train_queries"] = (2 * int(n_q)) // 3
        raw["training"]["n_train_queries"] = tr["n_train_queries"]
    try:
        weights = LossWeights(**tr.pop("weights"))
        training = TrainingConfig(seed=int(raw["seed"]), weights=weights, **tr)
        upqe = UPQEParams(**raw["upqe"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cutoffs = [int(c) for c in raw["eval"]["cutoffs"]]
    if not cutoffs or min(cutoffs) < 1:
        raise ConfigError("eval.cutoffs must be positive integers")
    every = int(raw["checkpoint_every"])
    if every < 1:
        raise ConfigError("checkpoint_every must be >= 1")
    return RunConfig(raw, training, upqe, cutoffs, raw["system"], every, raw["benchmark"], raw["theorems"])


def load(path: str | Path | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return build({}, seed)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return build(data, seed)
