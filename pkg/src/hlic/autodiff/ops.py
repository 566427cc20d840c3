"""Differentiable ops.

Each op computes its forward value with numpy and, when any input requires
gradients, records a vector-Jacobian product on the active graph.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .tensor import DomainError, ShapeError, Tensor, as_tensor, current_graph

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _make(op: str, value: np.ndarray, inputs: tuple, vjp, params=None) -> Tensor:
    out = Tensor.wrap(value)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(op, inputs, out, vjp, params)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make("div", out, (a, b), vjp)


# -- elementwise unary --------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.data.min():.3g})")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def pow_const(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    if not p.is_integer() and np.any(x.data < 0.0):
        raise DomainError(f"pow_const: negative base with non-integer exponent {p}")
    if p < 1.0 and np.any(x.data == 0.0):
        raise DomainError(f"pow_const: zero base with exponent {p} has no finite derivative")
    out = np.power(x.data, p)
    return _make("pow_const", out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),),
                 {"exponent": p})


def clamp_min(x, bound: float) -> Tensor:
    x = as_tensor(x)
    bound = float(bound)
    if not math.isfinite(bound):
        raise DomainError("clamp_min: bound must be finite")
    mask = x.data >= bound
    return _make("clamp_min", np.where(mask, x.data, bound), (x,), lambda g: (g * mask,),
                 {"bound": bound})


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Two-sided clamp built from clamp_min."""
    return neg(clamp_min(neg(clamp_min(x, lo)), -hi))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def normal_cdf(x) -> Tensor:
    """Standard normal CDF, elementwise."""
    x = as_tensor(x)
    return _make("normal_cdf", ndtr(x.data), (x,),
                 lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data),))


def add_uniform_noise(x, rng: np.random.Generator) -> Tensor:
    """x + U(-1/2, 1/2); the noise is a constant offset for gradients."""
    x = as_tensor(x)
    noise = rng.uniform(-0.5, 0.5, size=x.shape)
    return _make("add_uniform_noise", x.data + noise, (x,), lambda g: (g,))


# -- linear algebra and reductions -------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="need (..., m, k) @ (..., k, n)")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))
    return _make("matmul", out, (a, b), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make("reduce_sum", out, (x,), vjp, {"axis": axes})


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _make("reduce_mean", out, (x,), vjp, {"axis": axes})


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="axes must permute all dims")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# -- image ops ----------------------------------------------------------------

def gaussian_kernel(radius: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps of length 2*radius+1."""
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, radius: int, sigma: float) -> np.ndarray:
    """Banded (n - 2r) x n matrix applying the kernel with "valid" boundary."""
    k = gaussian_kernel(radius, sigma)
    m = np.zeros((n - 2 * radius, n))
    for i in range(n - 2 * radius):
        m[i, i:i + k.size] = k
    m.setflags(write=False)
    return m


def gaussian_blur_2d(x, radius: int = 5, sigma: float = 1.5) -> Tensor:
    """Separable Gaussian blur over the last two axes, "valid" boundary.

    Each spatial axis shrinks by ``2 * radius``.
    """
    x = as_tensor(x)
    if radius < 0 or sigma <= 0:
        raise DomainError(f"gaussian_blur_2d: bad radius/sigma ({radius}, {sigma})")
    size = 2 * radius + 1
    if x.ndim < 2 or x.shape[-1] < size or x.shape[-2] < size:
        raise ShapeError("gaussian_blur_2d", x.shape, detail=f"last two dims must be >= {size}")
    mh = _blur_matrix(x.shape[-2], radius, float(sigma))
    mw = _blur_matrix(x.shape[-1], radius, float(sigma))
    out = mh @ (x.data @ mw.T)

    def vjp(g):
        return (mh.T @ (g @ mw),)
    return _make("gaussian_blur_2d", out, (x,), vjp, {"radius": radius, "sigma": sigma})


def avg_downsample_2x(x) -> Tensor:
    """Average 2x2 cells over the last two axes; odd trailing row/col dropped."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError("avg_downsample_2x", x.shape, detail="last two dims must be >= 2")
    h, w = x.shape[-2] // 2, x.shape[-1] // 2
    lead = x.shape[:-2]
    cropped = x.data[..., : 2 * h, : 2 * w]
    out = cropped.reshape(lead + (h, 2, w, 2)).mean(axis=(-3, -1))

    def vjp(g):
        full = np.zeros(x.shape)
        up = np.repeat(np.repeat(g * 0.25, 2, axis=-2), 2, axis=-1)
        full[..., : 2 * h, : 2 * w] = up
        return (full,)
    return _make("avg_downsample_2x", out, (x,), vjp)


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "pow_const": pow_const,
    "clamp_min": clamp_min,
    "abs": abs_,
    "tanh": tanh,
    "matmul": matmul,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "reshape": reshape,
    "transpose": transpose,
    "gaussian_blur_2d": gaussian_blur_2d,
    "avg_downsample_2x": avg_downsample_2x,
    "normal_cdf": normal_cdf,
    "add_uniform_noise": add_uniform_noise,
}


def apply(op_kind: str, inputs, **params) -> Tensor:
    """Dispatch by op name, e.g. ``apply("clamp_min", [x], bound=0.0)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **params)
