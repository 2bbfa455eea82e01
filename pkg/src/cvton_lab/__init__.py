"""Toy-scale two-stage virtual try-on: TPS garment matching and context-conditioned synthesis."""

from . import data, discriminators, generator, matcher, metrics, tps, training
from .tps import TpsError, solve_tps, warp
from .training import TrainConfig, TryOnPipeline, infer, load_config, train_bpgm, train_generator

__version__ = "0.1.0"

__all__ = [
    "data",
    "discriminators",
    "generator",
    "matcher",
    "metrics",
    "tps",
    "training",
    "TpsError",
    "solve_tps",
    "warp",
    "TrainConfig",
    "TryOnPipeline",
    "infer",
    "load_config",
    "train_bpgm",
    "train_generator",
]
