"""Tensor and tape-based computation graph for reverse-mode differentiation."""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError):
    """Input shapes are invalid for an op."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(AutodiffError):
    """An op was evaluated outside its mathematical domain."""


class GraphError(AutodiffError):
    """Misuse of the graph: non-scalar backward, reuse after consumption, mixing graphs."""


class Tensor:
    """Dense float64 array that may take part in a recorded computation.

    Leaves are created directly; every op whose inputs require gradients
    produces a non-leaf recorded on the thread's active :class:`Graph`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @classmethod
    def wrap(cls, value) -> "Tensor":
        """Build a non-grad tensor around ``value`` without copying when it is float64."""
        t = cls.__new__(cls)
        t.data = np.asarray(value, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._graph = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the op implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow_const(self, exponent)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    params: dict = field(default_factory=dict)


class Graph:
    """Append-only tape of op records.

    Insertion order is a topological order, so backward simply walks the
    tape in reverse. A graph can be differentiated once; afterwards it is
    consumed and a new one must be recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._prev: Graph | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, vjp, params=None) -> None:
        if self.consumed:
            raise GraphError("cannot record on a consumed graph")
        for t in inputs:
            if t._node is not None and t._graph is not self:
                owner = "a consumed graph" if t._graph.consumed else "another graph"
                raise GraphError(f"{op}: input {t!r} was recorded on {owner}")
        output._graph = self
        output._node = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, vjp, params or {}))

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        if output.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        if self.consumed:
            raise GraphError("graph already consumed by a previous backward; re-record the computation")
        if output._graph is not self:
            raise GraphError("output was not recorded on this graph")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: output._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t
        result = {}
        for key, t in leaves.items():
            g = np.array(grads[key], dtype=np.float64).reshape(t.shape)
            t.grad = g
            result[t] = g
        self.consumed = True
        self.nodes = []
        return result


_local = threading.local()


def current_graph() -> Graph:
    """Return the active graph of this thread, starting a fresh one if needed."""
    g = getattr(_local, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _local.graph = g
    return g


@contextmanager
def recording(graph: Graph | None = None) -> Iterator[Graph]:
    """Make ``graph`` (or a new one) the active graph inside the block."""
    graph = graph if graph is not None else Graph()
    graph._prev = getattr(_local, "graph", None)
    _local.graph = graph
    try:
        yield graph
    finally:
        _local.graph = graph._prev
        graph._prev = None


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar output w.r.t. every requires_grad leaf.

    Gradients are written to each leaf's ``.grad`` (overwriting) and also
    returned keyed by leaf.
    """
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    if output._node is None:
        if not output.requires_grad:
            raise GraphError("output does not require grad")
        output.grad = np.ones_like(output.data)
        return {output: output.grad}
    return output._graph.backward(output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
