"""Dense tensors with a reverse-mode differentiation tape.

The engine is deliberately small: a ``Tensor`` wraps a row-major numpy
buffer, every differentiable operation attaches a ``Node`` describing how
to push gradients to its inputs, and ``Tape.trace`` linearizes the graph
reachable from a scalar loss into topological order for the backward walk.
Element precision (float32 or float64) is a process-global switch so the
same code can run finite-difference checks in 64-bit and training in
32-bit.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "DimensionError",
    "ContractError",
    "tensor",
    "as_tensor",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "grad_enabled",
    "set_nan_checks",
    "nan_checks_enabled",
]


class DimensionError(ValueError):
    """Shapes or axes do not satisfy an operation's contract."""


class ContractError(RuntimeError):
    """An operation was invoked outside its stated preconditions."""


_state = threading.local()


def _get(attr: str, default):
    return getattr(_state, attr, default)


def set_default_dtype(dtype) -> None:
    """Set the global element precision (np.float32 or np.float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported element precision: {dtype}")
    _state.dtype = dtype


def get_default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


class precision:
    """Context manager pinning the default dtype, e.g. ``with precision("float64"):``."""

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype)

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def grad_enabled() -> bool:
    return _get("grad", True)


class no_grad:
    """Disable tape recording inside the block (inference mode)."""

    def __enter__(self):
        self._saved = grad_enabled()
        _state.grad = False
        return self

    def __exit__(self, *exc):
        _state.grad = self._saved
        return False


def set_nan_checks(enabled: bool) -> None:
    """Debug-mode switch: verify every op output is finite."""
    _state.nan_checks = bool(enabled)


def nan_checks_enabled() -> bool:
    return _get("nan_checks", False)


class Node:
    """One recorded operation: inputs, output, and its gradient rule.

    ``backward_fn`` receives the gradient w.r.t. the node's output and
    returns one gradient array (or None) per input, already shaped like
    that input's buffer.
    """

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op}, out={self.output.shape})"


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # -- gradient plumbing ---------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires-grad leaf.

        ``self`` must be scalar. Repeated calls without ``zero_grad``
        accumulate, which is what per-step gradient summation relies on.
        """
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        Tape.trace(self).backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    # -- operator sugar (implementations live in ops.py) ----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent):
        from . import ops
        return ops.pow_const(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)

    def reshape(self, *shape):
        from . import ops
        return ops.reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, dtype=dtype)


class Tape:
    """Topologically ordered record of the operations below one root.

    Every node's inputs appear before the node itself; the backward walk
    visits each node exactly once, in reverse order.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        """Linearize the graph reachable from ``root`` (iterative postorder DFS).

        Nodes are marked visited at expansion time, not push time: a node
        reachable both directly and through a deeper chain must still be
        appended before everything that consumes its output.
        """
        nodes: list[Node] = []
        visited: set[int] = set()
        stack: list[tuple[Node, bool]] = []
        if root.node is not None:
            stack.append((root.node, False))
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                child = t.node
                if child is not None and id(child) not in visited:
                    stack.append((child, False))
        return cls(nodes)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            seed = np.ones_like(root.data)
        # Output gradients keyed by tensor identity; leaves accumulate into .grad.
        pending: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
        if root.requires_grad and root.node is None:
            root.accumulate_grad(pending[id(root)])
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=inp.dtype)
                if inp.node is None:
                    inp.accumulate_grad(g)
                else:
                    key = id(inp)
                    if key in pending:
                        pending[key] = pending[key] + g
                    else:
                        pending[key] = g


def make_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Create an op output, recording a tape node when gradients are live."""
    if nan_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
