"""Selective-activation training engine, dynamic additive attention adaptor, memory profiler."""

from __future__ import annotations

from .adaptor import AdaptorSpec, attach_adaptors, gumbel_sigmoid, sparsity
from .errors import ConfigError, DA3Error, DimensionError, InvariantViolation, NumericError
from .layers import (LayerSpec, ModelGraph, build_backbone, forward_record, init_params,
                     param_count, set_strategy)
from .profiler import compare, flops, profile
from .tape import Tape, Trainability, required_saves

__version__ = "0.1.0"

__all__ = [
    "AdaptorSpec", "ConfigError", "DA3Error", "DimensionError", "InvariantViolation",
    "LayerSpec", "ModelGraph", "NumericError", "Tape", "Trainability", "attach_adaptors",
    "build_backbone", "compare", "flops", "forward_record", "gumbel_sigmoid", "init_params",
    "param_count", "profile", "required_saves", "set_strategy", "sparsity",
]
