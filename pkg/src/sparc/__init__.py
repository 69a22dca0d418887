"""Desk-scale greedy decoder with SPARC attention recalibration and
attention-dynamics diagnostics."""

__version__ = "0.1.0"

from .attention import attention_step
from .cache import KVCache, SequenceLayout
from .decoder import Decoder, DecodeRequest, GenerationResult, InterventionMode
from .errors import (
    CapacityError,
    DegenerateDistributionError,
    EmptyContextError,
    FormatError,
    RangeError,
    ShapeError,
    SparcError,
    StateError,
)
from .intervention import SparcConfig, SparcState
from .model import ModelConfig, ModelWeights, random_weights
from .stdf import load_weights
from .trace import AttentionTrace, StepTrace

__all__ = [
    "AttentionTrace", "CapacityError", "DecodeRequest", "Decoder", "DegenerateDistributionError",
    "EmptyContextError", "FormatError", "GenerationResult", "InterventionMode", "KVCache",
    "ModelConfig", "ModelWeights", "RangeError", "SequenceLayout", "ShapeError", "SparcConfig",
    "SparcError", "SparcState", "StateError", "StepTrace", "attention_step", "load_weights",
    "random_weights",
]
