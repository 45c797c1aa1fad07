"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass. Applying a
function to tensors that require gradients records a :class:`Node` that
links the output to its inputs; :meth:`Tensor.backward` replays those nodes
in reverse creation order (a valid reverse topological order, since a node's
inputs always exist before it does).
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from contrastvae.errors import DomainError, NumericError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("id", "fn", "inputs")

    def __init__(self, fn: "Function", inputs: tuple["Tensor", ...]):
        self.id = next(_node_ids)
        self.fn = fn
        self.inputs = inputs


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` is float32 unless a floating array of another precision is
    passed in (the gradient checker works in float64).
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        # leaves that ask for gradients start at zero so parameters the loss
        # never reaches still report a (zero) gradient
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> "ComputationTape":
        """Populate ``grad`` on every reachable leaf that requires it.

        Leaf gradients accumulate, so callers zero them between steps.
        Returns the tape that was replayed.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = ComputationTape.trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        if self._node is None:
            if self.requires_grad:
                _accumulate(self, grads[id(self)])
            return tape
        for out in reversed(tape.outputs):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            node = out._node
            in_grads = node.fn.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate(inp, ig)
                elif id(inp) in grads:
                    grads[id(inp)] = grads[id(inp)] + ig
                else:
                    grads[id(inp)] = ig
        return tape

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.dtype, copy=True)
    else:
        leaf.grad += g


@dataclass
class TapeEntry:
    node_id: int
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class ComputationTape:
    """Operations reachable from a loss, in forward (topological) order."""

    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.id)
        return cls(found)

    @property
    def entries(self) -> list[TapeEntry]:
        return [
            TapeEntry(t._node.id, t._node.fn.name, tuple(id(i) for i in t._node.inputs), id(t))
            for t in self.outputs
        ]

    def __len__(self) -> int:
        return len(self.outputs)


# ---------------------------------------------------------------------------
# Function machinery
# ---------------------------------------------------------------------------


class Function:
    """One differentiable op. Subclasses implement ``forward``/``backward``
    on raw arrays; ``kw`` holds non-differentiable arguments so the op can be
    re-run on perturbed inputs by the gradient checker."""

    name = "function"

    def __init__(self, **kw: Any):
        self.kw = kw

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    def regime(self) -> np.ndarray | None:
        """For piecewise ops, which piece each element fell in on the last
        forward; None for smooth ops."""
        return None

    @classmethod
    def apply(cls, *inputs: Any, **kw: Any) -> Tensor:
        tensors = _coerce(inputs)
        fn = cls(**kw)
        with np.errstate(over="ignore", invalid="ignore"):
            out = fn.forward(*(t.data for t in tensors))
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite values produced by op '{cls.name}'")
        needs = is_grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out)
        result.requires_grad = needs
        if needs:
            result._node = Node(fn, tensors)
        return result


def _coerce(inputs: Sequence[Any]) -> tuple[Tensor, ...]:
    dtype = next((x.dtype for x in inputs if isinstance(x, Tensor)), DEFAULT_DTYPE)
    return tuple(x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in inputs)


def as_tensor(x: Any, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        if np.any(b == 0):
            raise DomainError("div: division by zero")
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class MatMul(Function):
    """Batched matrix product over the last two axes."""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.pos = a > 0
        return np.where(self.pos, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.pos,)

    def regime(self):
        return self.pos


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        self.y = _sigmoid(a)
        return self.y

    def backward(self, g):
        return (g * self.y * (1 - self.y),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)


class LogSigmoid(Function):
    """log σ(x) = -softplus(-x), evaluated without overflow."""

    name = "log_sigmoid"

    def forward(self, a):
        self.a = a
        return (np.minimum(a, 0) - np.log1p(np.exp(-np.abs(a)))).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * _sigmoid(-self.a),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.y = np.exp(a)
        return self.y

    def backward(self, g):
        return (g * self.y,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Clamp(Function):
    name = "clamp"

    def forward(self, a):
        lo, hi = self.kw.get("lo"), self.kw.get("hi")
        self.inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            self.inside &= a >= lo
        if hi is not None:
            self.inside &= a <= hi
        return np.clip(a, lo, hi)

    def backward(self, g):
        return (g * self.inside,)

    def regime(self):
        return self.inside


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(axis=self.kw["axis"], keepdims=self.kw["keepdims"]))

    def backward(self, g):
        axis = self.kw["axis"]
        if not self.kw["keepdims"] and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, a):
        self.shape = a.shape
        out = a.mean(axis=self.kw["axis"], keepdims=self.kw["keepdims"])
        self.count = a.size // max(np.asarray(out).size, 1)
        return np.asarray(out, dtype=a.dtype)

    def backward(self, g):
        axis = self.kw["axis"]
        if not self.kw["keepdims"] and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.kw["shape"])

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.kw["axes"]
        self.inv = None if axes is None else tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, self.inv),)


class GetItem(Function):
    name = "getitem"

    def forward(self, a):
        self.shape, self.dtype = a.shape, a.dtype
        return np.array(a[self.kw["key"]], copy=True)

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.kw["key"], g)
        return (out,)


class Take(Function):
    """Row lookup ``table[index]`` (embedding gather)."""

    name = "take"

    def forward(self, table):
        index = self.kw["index"]
        if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
            raise ShapeError(f"take: index out of range [0, {table.shape[0]})")
        self.shape = table.shape
        return table[index]

    def backward(self, g):
        index = self.kw["index"].reshape(-1)
        flat = g.reshape(index.size, -1)
        out = np.zeros((self.shape[0], flat.shape[1]), dtype=g.dtype)
        np.add.at(out, index, flat)
        return (out.reshape(self.shape),)


class Concat(Function):
    name = "concat"

    def forward(self, *xs):
        axis = self.kw["axis"]
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.kw["axis"]))


class MeanPoolRows(Function):
    """Average over the row axis (-2), optionally restricted by a 0/1 weight."""

    name = "mean_pool_rows"

    def forward(self, x):
        weight = self.kw.get("weight")
        if weight is None:
            weight = np.ones(x.shape[:-1], dtype=x.dtype)
        if weight.shape != x.shape[:-1]:
            raise ShapeError(f"mean_pool_rows: weight {weight.shape} vs rows {x.shape[:-1]}")
        # rows with zero total weight pool to zeros
        count = np.maximum(weight.sum(axis=-1, keepdims=True), 1)
        self.w = (weight / count)[..., None].astype(x.dtype, copy=False)
        return (x * self.w).sum(axis=-2)

    def backward(self, g):
        return (g[..., None, :] * self.w,)


NEG_INF = -1e9


class SoftmaxRows(Function):
    """Softmax over the last axis after adding a 0 / ``NEG_INF`` mask."""

    name = "softmax_rows"

    def forward(self, x):
        mask = self.kw.get("mask")
        z = x if mask is None else x + mask
        if mask is not None:
            allowed = np.broadcast_to(mask > NEG_INF / 2, z.shape)
            if not np.all(allowed.any(axis=-1)):
                raise ShapeError("softmax_rows: a row has no unmasked entry")
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        if mask is not None:
            e = np.where(allowed, e, 0).astype(x.dtype, copy=False)
        self.y = e / e.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class LogSumExpRows(Function):
    name = "logsumexp_rows"

    def forward(self, x):
        mask = self.kw.get("mask")
        z = x if mask is None else x + mask
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        s = e.sum(axis=-1, keepdims=True)
        self.p = e / s
        return (m + np.log(s))[..., 0]

    def backward(self, g):
        return (g[..., None] * self.p,)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gain, bias):
        eps = self.kw.get("eps", 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, g):
        d = self.xhat.shape[-1]
        lead = tuple(range(g.ndim - 1))
        ggain = (g * self.xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * self.gain
        gx = self.inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - self.xhat * (gx_hat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias
