"""Minimal reverse-mode automatic differentiation on float64 numpy arrays."""
from .ops import (
    OPS,
    abs_,
    add,
    add_uniform_noise,
    apply,
    avg_downsample_2x,
    clamp,
    clamp_min,
    div,
    exp,
    gaussian_blur_2d,
    gaussian_kernel,
    log,
    matmul,
    mul,
    neg,
    normal_cdf,
    pow_const,
    reduce_mean,
    reduce_sum,
    reshape,
    sub,
    tanh,
    transpose,
)
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .tensor import (
    AutodiffError,
    DomainError,
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    current_graph,
    recording,
)

__all__ = [name for name in dir() if not name.startswith("_")]
