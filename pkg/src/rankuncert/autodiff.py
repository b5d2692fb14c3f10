"""Reverse-mode automatic differentiation over numpy arrays.

Each op builds one node of a dynamic computation graph; ``backward`` walks the
graph once in reverse topological order and accumulates exact gradients into
the leaves. Nodes hold whole ndarrays, so the graph stays small (hundreds of
nodes per training step) and the heavy lifting happens inside numpy.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class PoisonedComputationError(RuntimeError):
    """A forward value turned NaN/Inf somewhere in the graph.

    ``op`` names the first operation (in execution order) whose output was
    non-finite, which is where the numeric problem entered.
    """

    def __init__(self, op: str, message: str):
        super().__init__(message)
        self.op = op


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    # collapse extra leading axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # collapse axes that were size-1 in the original
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A value in the computation graph.

    Constants (inputs, noise draws) are plain leaves; parameters are leaves
    with ``requires_grad=True``; everything else is produced by an op and
    carries a closure that routes its output gradient to its parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        self.data = np.asarray(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward: Callable[[Array], None] | None = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    def detach(self) -> "Tensor":
        """Same value, cut out of the graph."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def _accumulate(self, g: Array) -> None:
        # never mutate contributions in place: they may be shared views
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x`` as a constant leaf unless it already is a Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def _node(data: Array, op: str, parents: Sequence[Tensor],
          backward: Callable[[Array], None]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 op=op, parents=parents)
    if out.requires_grad:
        out._backward = backward
    return out


# -- primitive ops -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data - b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(out_data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out_data = a.data / b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, "div", (a, b), backward)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(out_data, f"pow{p}", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _node(out_data, "exp", (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(out_data, "log", (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _node(out_data, "sqrt", (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is identity inside, zero outside."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward(g: Array) -> None:
        if a.requires_grad:
            mask = (a.data >= lo) & (a.data <= hi)
            a._accumulate(g * mask)

    return _node(out_data, "clamp", (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul expects operands with ndim >= 2, got {a.ndim} and {b.ndim}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _node(out_data, "matmul", (a, b), backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape))

    return _node(out_data, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _node(out_data, "reshape", (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, ax1, ax2)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(out_data, "swapaxes", (a,), backward)


def transpose(a) -> Tensor:
    return swapaxes(a, -1, -2)


def take(a, idx) -> Tensor:
    """Basic indexing/slicing; backward scatter-adds into the source shape."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g: Array) -> None:
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _node(out_data, "take", (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(out_data, "concat", ts, backward)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in ts], axis=axis)

    def backward(g: Array) -> None:
        for i, t in enumerate(ts):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _node(out_data, "stack", ts, backward)


# -- composites ----------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax with the usual max-subtraction; the shift is a constant."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(sub(x, as_tensor(shift)))
    return div(e, sum_(e, axis=axis, keepdims=True))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) computed via max-subtraction; exact for any shift."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=axis, keepdims=True)
    inner = log(sum_(exp(sub(x, as_tensor(shift))), axis=axis, keepdims=True))
    out = add(inner, as_tensor(shift))
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


# -- backward pass ---------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _raise_poisoned(root: Tensor) -> None:
    # forward (execution) order = toposort order; report the first bad node
    for node in _toposort(root):
        if not np.all(np.isfinite(node.data)):
            raise PoisonedComputationError(
                node.op,
                f"non-finite value first produced by op {node.op!r} "
                f"(shape {node.data.shape})")
    raise PoisonedComputationError(
        root.op, "loss is non-finite but every recorded op output is finite")


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) into every reachable ``requires_grad`` leaf."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        _raise_poisoned(loss)
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    loss._accumulate(np.ones((), dtype=loss.data.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


class GradientTape:
    """Named collection of trainable parameters.

    One forward+backward at a time per tape (single-writer); distinct tapes
    are fully independent. ``grad`` returns a gradient per registered
    parameter — zeros for parameters the loss never touched.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, op=f"param:{name}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, loss: Tensor) -> dict[str, Array]:
        """Backward from ``loss``; exact gradients for every parameter."""
        self.zero_grad()
        backward(loss)
        out = {}
        for name, t in self._params.items():
            out[name] = np.zeros_like(t.data) if t.grad is None else t.grad
        return out


def grad(loss: Tensor, params: GradientTape) -> dict[str, Array]:
    """Gradients of a scalar loss with respect to every tape parameter."""
    return params.grad(loss)
