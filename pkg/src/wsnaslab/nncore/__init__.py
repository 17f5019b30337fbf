"""Minimal reverse-mode autodiff on numpy arrays.

Values are float32 by default (float64 available for gradient checking);
every reduction accumulates in float64 before casting back. The engine is
deliberately tiny: a tape of backward closures, a string-keyed parameter
store with named deterministic init streams, and the dozen primitives the
micro search spaces need.
"""

from .engine import (
    PRIMITIVES,
    BNState,
    Tape,
    Value,
    apply_primitive,
    avgpool3x3,
    batchnorm,
    channel_pad,
    concat_channels,
    conv1x1,
    conv3x3,
    cross_entropy,
    dropout_mask,
    global_pool,
    identity_op,
    linear,
    matmul2d,
    mix_axis,
    mul_mask,
    reduce_sum,
    reshape,
    relu,
    scale_channels,
    sum_tensors,
    take_axis,
    zero_op,
)
from .gradcheck import finite_diff_check
from .params import ParamStore, load_checkpoint, named_rng, save_checkpoint, stream_key

__all__ = [
    "BNState",
    "PRIMITIVES",
    "ParamStore",
    "Tape",
    "Value",
    "apply_primitive",
    "avgpool3x3",
    "batchnorm",
    "channel_pad",
    "concat_channels",
    "conv1x1",
    "conv3x3",
    "cross_entropy",
    "dropout_mask",
    "finite_diff_check",
    "global_pool",
    "identity_op",
    "linear",
    "load_checkpoint",
    "matmul2d",
    "mix_axis",
    "mul_mask",
    "named_rng",
    "reduce_sum",
    "relu",
    "reshape",
    "save_checkpoint",
    "scale_channels",
    "stream_key",
    "sum_tensors",
    "take_axis",
    "zero_op",
]
