"""Numeric substrate: tensors, autodiff, RNG, kernels and the EVT1 file format."""

from effvit.core.rng import Rng
from effvit.core.tensor import (
    CATEGORIES,
    DTYPES,
    OP_CATEGORY,
    Graph,
    Tensor,
    add,
    backward,
    batchnorm,
    concat_channels,
    conv2d,
    conv_out_extent,
    cross_entropy,
    custom_op,
    finite_diff_grad,
    full,
    global_avg_pool,
    linear,
    matmul,
    mul,
    no_checks,
    ones,
    op_hook,
    record,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    set_checks,
    sigmoid,
    softmax_lastdim,
    split_channels,
    tensor_new,
    transpose_last2,
    trunc_normal,
    uniform,
    zeros,
)

__all__ = [name for name in dir() if not name.startswith("_")]
