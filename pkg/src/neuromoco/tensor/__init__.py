"""Tensor substrate: autodiff core, network primitives, checkpoint I/O."""
from neuromoco.tensor.core import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    batched_matmul,
    concat,
    exp,
    flatten,
    get_default_dtype,
    getitem,
    l2_normalize,
    log,
    matmul,
    mean_over,
    mul,
    mul_elementwise,
    neg,
    no_grad,
    precision,
    reciprocal,
    relu,
    reshape,
    scale,
    split,
    stack,
    sub,
    sum_over,
    transpose,
)
from neuromoco.tensor.nn import (
    SURROGATE_ALPHA,
    LIFConfig,
    avg_pool2d,
    batch_norm,
    conv2d,
    cross_entropy_from_logits,
    global_avg_pool,
    lif_multistep,
    lif_step,
    linear,
    max_pool2d,
    spike,
    surrogate_grad,
)

from neuromoco.tensor.io import read_checkpoint, write_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
