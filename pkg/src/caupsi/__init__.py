"""Cognitive-causal multi-task learning at desk scale.

A numpy-only implementation of a four-task driver state recognition
architecture: multi-view frozen encoders, gated cross-view attention, a
bounded psychological conditioning signal, prototype-based soft-label
propagation between task heads, and the full training system, all on a
small tape-based autodiff engine.
"""

__version__ = "0.1.0"

from .config import (Ablation, GeneratorConfig, LossConfig, ModelConfig,
                     TrainConfig)
from .tensor import Graph, Tensor, backward, grad_check, no_grad

__all__ = [
    "Ablation", "GeneratorConfig", "LossConfig", "ModelConfig", "TrainConfig",
    "Graph", "Tensor", "backward", "grad_check", "no_grad",
]
