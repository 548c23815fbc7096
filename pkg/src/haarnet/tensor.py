"""Dense rank-4 tensors with a dynamic reverse-mode autodiff tape.

Every tensor is a ``(batch, channels, height, width)`` array of 32-bit floats.
Operations are subclasses of :class:`Function`; applying one to tensors that
require gradients records a node on the output, and :func:`backward` walks the
recorded graph in reverse topological order.

The same operations run unchanged on float64 data. The gradient oracle
(:func:`finite_diff_grad`) relies on that to evaluate central differences at a
precision the float32 path cannot offer.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, GraphStateError, ShapeError

DTYPE = np.float32

_grad_enabled = True
_decision_log: list[list[np.ndarray]] = []


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_decisions() -> Iterator[list[np.ndarray]]:
    """Collect the discrete choices (argmax indices, max masks) made inside the block.

    Two evaluations of a piecewise-linear function lie on the same linear piece
    exactly when their decision lists are equal. The gradient checker uses this
    to certify that a sample point is free of ties.
    """
    log: list[np.ndarray] = []
    _decision_log.append(log)
    try:
        yield log
    finally:
        _decision_log.pop()


def _note_decision(arr: np.ndarray) -> None:
    for log in _decision_log:
        log.append(np.array(arr, copy=True))


def _as_rank4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim > 4:
        raise ShapeError(f"tensors are rank 4, got shape {arr.shape}")
    if arr.ndim < 4:
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    return arr


class Tensor:
    """A rank-4 float array that can take part in an autodiff graph.

    Lower-rank inputs are left-padded with unit extents, so ``Tensor([1, 2])``
    has shape ``(1, 1, 1, 2)`` and a 2-D image becomes ``(1, 1, H, W)``.

    Args:
        data: Array-like values.
        requires_grad: Whether :func:`backward` should deposit ``grad`` here.
        dtype: Storage type. Defaults to float32; float64 is reserved for the
            finite-difference oracle.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or DTYPE, copy=True)
        self.data = _as_rank4(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Function | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full((1, 1, 1, 1), x, dtype=like.dtype))


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` on raw arrays, stash whatever the
    backward rule needs on ``self``, and implement ``backward`` returning one
    gradient array (or ``None``) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    def needs_grad(self, i: int) -> bool:
        return self.inputs[i].requires_grad

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = _grad_enabled and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad=track)
        if track:
            result._node = fn
        return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


class _Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class _Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs_grad(0) else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs_grad(1) else None
        return ga, gb


class _Max(Function):
    # ties go to the first operand
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        self.first = a >= b
        _note_decision(self.first)
        # np.maximum leaves the sign of tied zeros unspecified; pick explicitly
        return np.where(self.first, a, b).astype(np.result_type(a, b), copy=False)

    def backward(self, g):
        gb = np.where(self.first, 0, g).astype(g.dtype, copy=False)
        # g - gb is exactly g where the first operand won and 0 elsewhere
        ga = g - gb
        return _unbroadcast(ga, self.shapes[0]), _unbroadcast(gb, self.shapes[1])


class _Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, g):
        s = self.out
        return (g * s * (1 - s),)


class _Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        _note_decision(self.mask)
        return np.where(self.mask, a, a.dtype.type(0))

    def backward(self, g):
        return (np.where(self.mask, g, 0).astype(g.dtype, copy=False),)


_ELEMENTWISE = {
    "add": _Add,
    "sub": _Sub,
    "mul": _Mul,
    "max": _Max,
    "sigmoid": _Sigmoid,
    "relu": _Relu,
}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply one of ``add, sub, mul, max, sigmoid, relu``.

    Binary kinds accept equal shapes or an operand with unit extents along the
    axes to broadcast, e.g. a ``(1, C, 1, 1)`` per-channel vector.
    """
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    unary = kind in ("sigmoid", "relu")
    if unary:
        if b is not None:
            raise ContractError(f"{kind} takes one operand")
        return fn.apply(a)
    if b is None:
        raise ContractError(f"{kind} takes two operands")
    return fn.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _Mul.apply(a, b)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return _Max.apply(a, b)


def sigmoid(a: Tensor) -> Tensor:
    return _Sigmoid.apply(a)


def relu(a: Tensor) -> Tensor:
    return _Relu.apply(a)


class _Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(dtype=a.dtype)).reshape(1, 1, 1, 1)

    def backward(self, g):
        return (np.broadcast_to(g, self.shape).copy(),)


class _Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(dtype=a.dtype)).reshape(1, 1, 1, 1)

    def backward(self, g):
        return (np.full(self.shape, g.reshape(()) / np.prod(self.shape), dtype=g.dtype),)


class _MaxAll(Function):
    def forward(self, a):
        self.shape = a.shape
        # np.argmax returns the first maximiser in row-major order
        self.idx = int(np.argmax(a))
        _note_decision(np.array([self.idx]))
        return a.reshape(-1)[self.idx].reshape(1, 1, 1, 1).copy()

    def backward(self, g):
        out = np.zeros(int(np.prod(self.shape)), dtype=g.dtype)
        out[self.idx] = g.reshape(())
        return (out.reshape(self.shape),)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements as a ``(1, 1, 1, 1)`` tensor."""
    return _Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return _Mean.apply(a)


def max_all(a: Tensor) -> Tensor:
    """Largest element; the gradient goes to the first maximiser."""
    return _MaxAll.apply(a)


class _Cat(Function):
    def forward(self, *arrays):
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
                raise ShapeError(f"cannot concatenate {ref} with {a.shape} along channels")
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, self.splits, axis=1))


def cat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    return _Cat.apply(*tensors)


class _GlobalAvgPool(Function):
    def forward(self, a):
        self.shape = a.shape
        return a.mean(axis=(2, 3), keepdims=True, dtype=a.dtype)

    def backward(self, g):
        n = self.shape[2] * self.shape[3]
        return (np.broadcast_to(g / n, self.shape).astype(g.dtype),)


def global_avg_pool(a: Tensor) -> Tensor:
    return _GlobalAvgPool.apply(a)


class _Expand(Function):
    def forward(self, a, shape):
        _check_broadcast(a, np.empty(shape, dtype=bool))
        self.shape = a.shape
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    def backward(self, g):
        return (_unbroadcast(g, self.shape),)


def expand(a: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    """Broadcast unit axes of ``a`` up to ``shape``."""
    return _Expand.apply(a, shape=tuple(shape))


class _UpsampleNearest(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, g):
        n, c, h, w = g.shape
        f = self.factor
        return (g.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    return _UpsampleNearest.apply(a, factor=factor)


class _PadReplicate(Function):
    def forward(self, a, bottom, right):
        self.shape = a.shape
        return np.pad(a, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")

    def backward(self, g):
        _, _, h, w = self.shape
        g = g.copy()
        g[:, :, h - 1, :] += g[:, :, h:, :].sum(axis=2)
        g[:, :, :, w - 1] += g[:, :, :, w:].sum(axis=3)
        return (np.ascontiguousarray(g[:, :, :h, :w]),)


def pad_replicate(a: Tensor, bottom: int, right: int) -> Tensor:
    """Extend the bottom/right border by repeating the last row/column."""
    if bottom == 0 and right == 0:
        return a
    return _PadReplicate.apply(a, bottom=bottom, right=right)


class Graph:
    """The recorded operations reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)

    @property
    def operations(self) -> list[Function]:
        return [t._node for t in self.nodes if t._node is not None]

    def __len__(self) -> int:
        return len(self.operations)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring it.

    Raises:
        ContractError: ``loss`` is not a single-element tensor.
        GraphStateError: the graph behind ``loss`` was already differentiated.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a (1,1,1,1) loss, got {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise ContractError("loss does not depend on any tensor that requires grad")
    if graph is None:
        graph = Graph.trace(loss)
    ops = graph.operations
    if not ops:
        raise ContractError("empty graph")
    if any(op.consumed for op in ops):
        raise GraphStateError("graph already consumed by a previous backward; run a new forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.nodes):
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None and t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        node.consumed = True
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for op in ops:
        # release saved forward state
        op.__dict__ = {"inputs": op.inputs, "consumed": True}


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is promoted to float64 before perturbation so the oracle is not
    limited by single-precision rounding; ``f`` must accept such tensors.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = x.data.astype(np.float64)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    grad = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor._wrap(base.copy())).data.astype(np.float64).reshape(())
        flat[i] = orig - eps
        lo = f(Tensor._wrap(base.copy())).data.astype(np.float64).reshape(())
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return Tensor._wrap(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
