"""Range-agnostic iterative multi-view depth estimation."""

from . import diffcore, geometry, encoders, matcher, updater, pipeline, training, synthdata, fileio
from .model import ModelConfig, PAPER_SCALE, init_params, param_count

__all__ = [
    "diffcore", "geometry", "encoders", "matcher", "updater", "pipeline",
    "training", "synthdata", "fileio",
    "ModelConfig", "PAPER_SCALE", "init_params", "param_count",
]

__version__ = "0.1.0"
