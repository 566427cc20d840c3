"""Adam with bias correction, operating in place on Tensor parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import AutodiffError, Tensor


class NonFiniteGradient(AutodiffError):
    def __init__(self, name: str):
        self.param_name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
              names=None, lr_scales=None) -> AdamState:
    """One Adam update applied in place to ``params[i].data``.

    A ``None`` gradient leaves that parameter and its moments untouched.
    All gradients are validated before any parameter is modified.
    ``lr_scales`` optionally multiplies the learning rate per parameter.
    """
    if state.step < 0:
        raise ValueError("step counter must be >= 0")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state disagree in length")
    names = names or [p.name or f"param{i}" for i, p in enumerate(params)]
    for p, g, m, name in zip(params, grads, state.m, names):
        if g is None:
            continue
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: param {p.data.shape}, grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    scales = lr_scales or [1.0] * len(params)
    for p, g, m, v, scale in zip(params, grads, state.m, state.v, scales):
        if g is None:
            continue
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= scale * lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Optimizer over a fixed, named list of parameters."""

    def __init__(self, params: dict[str, Tensor] | list[Tensor], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, lr_scales: dict[str, float] | None = None):
        if isinstance(params, dict):
            self.names = list(params)
            self.params = list(params.values())
        else:
            self.params = list(params)
            self.names = [p.name or f"param{i}" for i, p in enumerate(self.params)]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scales = [float((lr_scales or {}).get(n, 1.0)) for n in self.names]
        self.state = AdamState()

    def step(self, grads=None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps,
                  names=self.names, lr_scales=self.lr_scales)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        m = self.state.m or [np.zeros_like(p.data) for p in self.params]
        v = self.state.v or [np.zeros_like(p.data) for p in self.params]
        out = {"step": np.array(self.state.step)}
        for name, mi, vi in zip(self.names, m, v):
            out[f"m.{name}"] = mi.copy()
            out[f"v.{name}"] = vi.copy()
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.state = AdamState(
            m=[np.array(arrays[f"m.{n}"], dtype=np.float64) for n in self.names],
            v=[np.array(arrays[f"v.{n}"], dtype=np.float64) for n in self.names],
            step=int(arrays["step"]),
        )
