"""Tensors and the reverse-mode computation record.

A :class:`ComputationRecord` is a tape.  While one is active (``with rec:``)
every primitive applied to a tensor that lives on it appends a node holding
the vector-Jacobian product of that primitive.  Nodes are appended in
execution order, so the list is already topologically sorted and
:meth:`ComputationRecord.backward` just walks it in reverse.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float64 array, optionally attached to a record node."""

    __slots__ = ("data", "record", "index", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, record: "ComputationRecord | None" = None, index: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.record = record
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        tag = f", node={self.index}" if self.index is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar over the primitives
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul, scalar_mul
        if isinstance(other, (int, float, np.floating, np.integer)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .ops import scalar_mul
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    vjp: Callable[..., Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    # selective vjps take a second argument flagging which inputs need gradients
    selective: bool = False


_local = threading.local()


def active_record() -> "ComputationRecord | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass(eq=False)
class ComputationRecord:
    """Tape of primitive applications; one per experiment thread."""

    nodes: list[Node] = field(default_factory=list)
    # weak, so leaf -> record is the only link and tapes free without the cyclic GC
    leaves: list[weakref.ref] = field(default_factory=list)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def leaf(self, data) -> Tensor:
        """Register a new differentiable input on this record."""
        arr = data.data if isinstance(data, Tensor) else data
        arr = np.array(arr, dtype=np.float64)
        t = Tensor(arr, self, len(self.nodes))
        self.nodes.append(Node("leaf", (), None, t.shape))
        self.leaves.append(weakref.ref(t))
        return t

    def push(self, op: str, inputs: Sequence[Tensor | None], out: np.ndarray, vjp,
             selective: bool = False) -> Tensor:
        refs = []
        for t in inputs:
            if isinstance(t, Tensor) and t.record is self:
                refs.append(t.index)
            else:
                refs.append(None)
        t = Tensor(out, self, len(self.nodes))
        self.nodes.append(Node(op, tuple(refs), vjp, t.shape, selective))
        return t

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.record is not self:
            raise ValueError("loss was not produced on this record")
        if loss.size != 1 or loss.data.ndim > 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.data)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            if node.selective:
                in_grads = node.vjp(g, tuple(r is not None for r in node.inputs))
            else:
                in_grads = node.vjp(g)
            for ref, ig in zip(node.inputs, in_grads):
                if ref is None or ig is None:
                    continue
                if grads[ref] is None:
                    grads[ref] = np.array(ig, dtype=np.float64)
                else:
                    grads[ref] = grads[ref] + ig
            grads[i] = None if node.op != "leaf" else grads[i]
        out = {}
        for ref in self.leaves:
            leaf = ref()
            if leaf is None:
                continue
            g = grads[leaf.index] if leaf.index < len(grads) else None
            out[leaf] = np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape)
        return Gradients(out)


class Gradients(dict):
    """Leaf tensor -> gradient array.  Unreached leaves map to zeros."""

    def __getitem__(self, key):
        if isinstance(key, Tensor) and key not in self:
            raise KeyError(f"{key!r} is not a leaf of this record")
        return super().__getitem__(key)


def backward(record: ComputationRecord, loss: Tensor) -> Gradients:
    return record.backward(loss)
