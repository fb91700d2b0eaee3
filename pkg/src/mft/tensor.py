"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op computes its result with NumPy and, when at least one
input requires a gradient, appends a node to the active :class:`Tape`. A node
keeps the parent tensors and a closure mapping the output gradient to one
gradient per parent. :func:`backward` walks the tape once in reverse.

Data defaults to float32; switch to float64 (e.g. for finite-difference
checks) with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

_DTYPE = np.float32
_local = threading.local()
# op name -> multiplicative corruption applied to that op's parent gradients
_FAULTS: dict[str, float] = {}


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the default dtype for new tensors."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Node:
    __slots__ = ("op", "out", "parents", "backward_fn")

    def __init__(self, op, out, parents, backward_fn):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so parents always precede children.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


@contextlib.contextmanager
def tape_scope() -> Iterator[Tape]:
    """Record into a fresh tape for the duration of the block."""
    stack = _tape_stack()
    tape = Tape()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    old = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.01) -> Iterator[None]:
    """Corrupt the backward rule of ``op`` (fault injection for grad checks)."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: tuple[Tape, int] | None = None
        self.name = name

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
    def dtype(self):
        return self.data.dtype

    @property
    def tape_id(self):
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, checking finiteness and taping it if needed.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = current_tape()
        out._node = (tape, tape.record(Node(op, out, tuple(parents), backward_fn)))
    return out


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(.) to every reachable tensor that requires grad.

    Leaf gradients accumulate into ``.grad``; the tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape, index = loss._node
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes[: index + 1]):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        factor = _FAULTS.get(node.op)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            if parent._node is None:
                pg = np.asarray(pg, dtype=parent.data.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    if np.any(x <= 0):
        raise NumericError("log: argument must be positive")
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)
    return record("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# -- reductions / shape ----------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (a,), grad)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {old} does not broadcast to {shape}") from None
    return record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} disagree off axis {axis}"
            )
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along ``axis`` (half-open, no negative indices)."""
    ax = axis % a.ndim
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def grad(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record("slice", a.data[index].copy(), (a,), grad)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is applied to every row of ``a`` as one GEMM.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def grad2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ bd.T, a2.T @ g2)

        return record("matmul", out, (a, b), grad2)
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}") from None

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return record("matmul", out, (a, b), grad)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return record("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def grad(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return record("layer_norm", (xhat * gd + bias.data).astype(xd.dtype), (x, gain, bias), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def sinusoidal_table(length: int, dim: int, dtype=None) -> np.ndarray:
    """Sine on even columns, cosine on odd, frequency 1/10000^(2k/dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, k / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : dim // 2])
    return table.astype(dtype or _DTYPE)


__all__ = [
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "current_tape",
    "default_dtype",
    "dropout",
    "grad_enabled",
    "inject_fault",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "precision",
    "record",
    "relu",
    "reshape",
    "scale",
    "set_default_dtype",
    "sigmoid",
    "sinusoidal_table",
    "slice_",
    "softmax",
    "sub",
    "sum_",
    "swap_last",
    "tape_scope",
    "transpose",
]
