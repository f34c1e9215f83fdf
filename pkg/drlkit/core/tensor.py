"""
Dense tensors with a reverse-mode gradient tape.

numpy carries the storage. Every op computes in float64 and stores the result
in the narrowest storage dtype of its inputs (float64 unless every input is
float32). An op is recorded on the tape only when an input requires grad and
grad mode is enabled on the current thread.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from drlkit.utils.errors import GradError, LabelError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
ArrayLike = Union["Tensor", np.ndarray, Sequence, Scalar]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager disabling tape recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


@dataclass(eq=False)
class TapeNode:
    """One recorded op: its identifier, its inputs and the backward rule.

    ``backward`` maps the upstream gradient to one gradient per input (None
    for inputs that receive nothing). Saved activations live in its closure.
    """
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite result from {op}")


def _storage_dtype(*tensors: "Tensor") -> np.dtype:
    if tensors and all(t.data.dtype == np.float32 for t in tensors):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from exc


class Tensor:
    """Dense real array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=np.float64,
        name: Optional[str] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None
        self.name = name

    @classmethod
    def _from_op(
        cls,
        values: np.ndarray,
        inputs: tuple,
        op: str,
        backward: Callable[[np.ndarray], tuple],
    ) -> "Tensor":
        _check_finite(values, op)
        out = cls.__new__(cls)
        out.data = values.astype(_storage_dtype(*inputs), copy=False)
        out.grad = None
        out.name = None
        track = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = track
        out._node = TapeNode(op, inputs, backward) if track else None
        return out

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------------
    # Operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def sign(self):
        return sign(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def clamp(self, lo: Optional[float] = None, hi: Optional[float] = None):
        return clamp(self, lo, hi)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int = -1):
        return tmax(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)


def as_tensor(value: ArrayLike, dtype=np.float64) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


# ----------------------------------------------------------------------
# Elementwise ops
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    values = _f64(a) + _f64(b)

    def _backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return Tensor._from_op(values, (a, b), "add", _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    values = _f64(a) - _f64(b)

    def _backward(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return Tensor._from_op(values, (a, b), "sub", _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = _f64(a), _f64(b)
    values = av * bv

    def _backward(g):
        return _reduce_to_shape(g * bv, a.shape), _reduce_to_shape(g * av, b.shape)

    return Tensor._from_op(values, (a, b), "mul", _backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-_f64(a), (a,), "neg", lambda g: (-g,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = _f64(a)
    # subgradient 0 at 0
    mask = av > 0

    return Tensor._from_op(np.where(mask, av, 0.0), (a,), "relu", lambda g: (g * mask,))


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = _f64(a)
    direction = np.sign(av)
    return Tensor._from_op(np.abs(av), (a,), "abs", lambda g: (g * direction,))


def sign(a: ArrayLike) -> Tensor:
    """Elementwise sign with sign(0) = 0. Its gradient is zero everywhere."""
    a = as_tensor(a)
    values = np.sign(_f64(a))
    return Tensor._from_op(values, (a,), "sign", lambda g: (np.zeros_like(g),))


def clamp(a: ArrayLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    a = as_tensor(a)
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"clamp bounds out of order: {lo} > {hi}")
    av = _f64(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    values = np.clip(av, lo_v, hi_v)
    inside = (av >= lo_v) & (av <= hi_v)
    return Tensor._from_op(values, (a,), "clamp", lambda g: (g * inside,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        values = np.exp(_f64(a))
    return Tensor._from_op(values, (a,), "exp", lambda g: (g * values,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = _f64(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(av)
    return Tensor._from_op(values, (a,), "log", lambda g: (g / av,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "abs": absolute,
    "sign": sign,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, a: ArrayLike, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    Binary kinds (add, sub, mul) take ``b`` as a tensor or scalar; ``clamp``
    takes ``b`` as a (lo, hi) pair; the rest are unary.
    """
    if kind == "clamp":
        lo, hi = b if b is not None else (None, None)
        return clamp(a, lo, hi)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op '{kind}'") from None
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"'{kind}' needs a second operand")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------------
# Shape and reduction ops
# ----------------------------------------------------------------------

def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    try:
        values = _f64(a).reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return Tensor._from_op(values, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def take_slice(a: ArrayLike, index) -> Tensor:
    """Basic indexing (ints and slices) with a scatter backward."""
    a = as_tensor(a)
    values = np.array(_f64(a)[index])

    def _backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return Tensor._from_op(values, (a,), "slice", _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    try:
        values = np.concatenate([_f64(p) for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(values, tuple(parts), "concat", _backward)


def tsum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    values = np.array(_f64(a).sum(axis=axis, keepdims=keepdims))

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(values, (a,), "sum", _backward)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a: ArrayLike, axis: int = -1) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    av = _f64(a)
    winners = np.argmax(av, axis=axis)
    values = np.take_along_axis(av, np.expand_dims(winners, axis), axis=axis).squeeze(axis)

    def _backward(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(winners, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor._from_op(values, (a,), "max", _backward)


def pick(a: ArrayLike, columns: Sequence[int]) -> Tensor:
    """Row-wise gather: out[n] = a[n, columns[n]] for a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"pick needs a 2-D tensor, got shape {a.shape}")
    cols = np.asarray(columns, dtype=np.int64)
    if cols.shape != (a.shape[0],):
        raise ShapeError(f"pick needs {a.shape[0]} column indices, got shape {cols.shape}")
    rows = np.arange(a.shape[0])
    values = _f64(a)[rows, cols]

    def _backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[rows, cols] = g
        return (full,)

    return Tensor._from_op(values, (a,), "pick", _backward)


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = _f64(a), _f64(b)

    def _backward(g):
        return g @ bv.T, av.T @ g

    return Tensor._from_op(av @ bv, (a, b), "matmul", _backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an N×C×H×W input with an F×C×kh×kw kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} channels, input has {c}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )

    xv, kv = _f64(x), _f64(kernel)
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    values = np.einsum("nchwij,fcij->nfhw", cols, kv, optimize=True)

    def _backward(g):
        grad_kernel = np.einsum("nfhw,nchwij->fcij", g, cols, optimize=True)
        grad_padded = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + (ho - 1) * stride + 1 : stride,
                            j : j + (wo - 1) * stride + 1 : stride] += np.einsum(
                    "nfhw,fc->nchw", g, kv[:, :, i, j], optimize=True
                )
        if padding:
            grad_padded = grad_padded[:, :, padding:-padding, padding:-padding]
        return grad_padded, grad_kernel

    return Tensor._from_op(values, (x, kernel), "conv2d", _backward)


# ----------------------------------------------------------------------
# Softmax family
# ----------------------------------------------------------------------

def _stable_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    probs = _stable_softmax(_f64(a), axis)

    def _backward(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(probs, (a,), "softmax", _backward)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = _f64(a)
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    values = shifted - lse
    probs = np.exp(values)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(values, (a,), "log_softmax", _backward)


def check_labels(labels: Sequence[int], num_classes: int, batch: Optional[int] = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if batch is not None and y.shape[0] != batch:
        raise ShapeError(f"expected {batch} labels, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def softmax_ce(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of N×C logits against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_ce needs N×C logits, got shape {logits.shape}")
    n, c = logits.shape
    y = check_labels(labels, c, n)
    z = _f64(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    values = np.array((lse - shifted[rows, y]).mean())

    def _backward(g):
        grad = np.exp(shifted - lse[:, None])
        grad[rows, y] -= 1.0
        return (grad * (g / n),)

    return Tensor._from_op(values, (logits,), "softmax_ce", _backward)


def cross_entropy_per_example(logits: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    """Per-row cross-entropy, computed outside the tape."""
    z = np.asarray(logits, dtype=np.float64)
    y = check_labels(labels, z.shape[1], z.shape[0])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(z.shape[0]), y]


# ----------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
    """Post-order over the tape: every tensor follows all of its inputs."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor._node is not None:
            for parent in tensor._node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``grad`` of the requires-grad leaves reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays; callers zero them
    between uses. When ``inputs`` is given only those leaves receive
    gradients, which lets concurrent attacks share read-only parameters, and
    a requested leaf the loss does not depend on gets a zero gradient.
    """
    if loss.size != 1:
        raise GradError(f"backward() needs a scalar loss, got shape {loss.shape}")
    requested = None if inputs is None else list(inputs)
    if not loss.requires_grad:
        logger.debug("backward() on a tensor with no tape; nothing to do")
        _zero_fill(requested)
        return
    allowed = None if requested is None else {id(t) for t in requested}

    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for tensor in reversed(_topological_order(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        node = tensor._node
        if node is None:
            if allowed is None or id(tensor) in allowed:
                _check_finite(g, "backward")
                tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
            continue
        for parent, pg in zip(node.inputs, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward of {node.op}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    _zero_fill(requested)


def _zero_fill(leaves: Optional[list]) -> None:
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data, dtype=np.float64)
