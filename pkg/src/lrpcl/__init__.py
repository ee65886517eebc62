"""Attribution-gated continual fine-tuning for small decoder-only Transformers.

The package implements layer-wise relevance propagation (LRP) over every
parameter of a Transformer block, turns per-sample relevance into per-task
importance priors, and uses those priors to gate gradients while the model
learns a sequence of synthetic tasks.
"""

from lrpcl.numerics import NumericalError, ShapeError
from lrpcl.model import ModelConfig, ModelParams, forward, greedy_decode, init_params
from lrpcl.attribution import AttributionConfig, RelevanceMap, attribute

__all__ = [
    "AttributionConfig",
    "ModelConfig",
    "ModelParams",
    "NumericalError",
    "RelevanceMap",
    "ShapeError",
    "attribute",
    "forward",
    "greedy_decode",
    "init_params",
]

__version__ = "0.1.0"
