"""Unified retrieval and ranking: a two-tower encoder trained jointly with a listwise transformer."""

from .cascade import train_disjoint
from .listwise import LTConfig, LTModel, lt_forward
from .metrics import UPQEParams, compare, evaluate_system, upqe_value
from .trainer import TrainingConfig, fit
from .tte import TTEModel, build_index, top_k
from .world import World, generate_world, load_world

__version__ = "0.1.0"

__all__ = [
    "LTConfig",
    "LTModel",
    "TTEModel",
    "TrainingConfig",
    "UPQEParams",
    "World",
    "build_index",
    "compare",
    "evaluate_system",
    "fit",
    "generate_world",
    "load_world",
    "lt_forward",
    "top_k",
    "train_disjoint",
    "upqe_value",
]
