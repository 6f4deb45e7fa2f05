"""Dense tensors with reverse-mode differentiation.

Every operation in this module builds a node whose backward closure maps the
gradient of its output to the gradients of its parents. ``Tensor.backward``
walks the graph once in reverse topological order and then releases it.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import GDAP_DTYPE
from error_handler import DomainError, ShapeError, UsageError

logger = logging.getLogger(__name__)

DTYPES = {"float64": np.float64, "float32": np.float32}

_default_dtype = DTYPES.get(GDAP_DTYPE, np.float64)
_grad_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Axis = Optional[Union[int, Tuple[int, ...]]]


def get_default_dtype():
    return _default_dtype


def set_default_dtype(name: str) -> None:
    """Switch the dtype new tensors are created with (float64 or float32)."""
    global _default_dtype
    if name not in DTYPES:
        raise UsageError(f"unsupported dtype '{name}', expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]
    logger.debug(f"Default tensor dtype set to {name}")


@contextmanager
def default_dtype(name: str) -> Iterator[None]:
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """An n-dimensional array that may take part in a differentiation graph."""

    # ndarray <op> Tensor must dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = _op
        self._consumed = False

    # ---- construction helpers ----
    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape, value: float, requires_grad: bool = False) -> "Tensor":
        return cls(np.full(shape, value), requires_grad=requires_grad)

    # ---- introspection ----
    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # ---- differentiation ----
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every reachable node that requires grad."""
        if self._consumed:
            raise UsageError("graph already consumed by a previous backward(); run a new forward pass")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss is not connected to any tensor that requires grad")

        order = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True

    # ---- operators ----
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return hadamard(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return hadamard(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return negate(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def flatten(self) -> "Tensor":
        return reshape(self, (self.size,))

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]], op: str) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def elu(x: Tensor) -> Tensor:
    neg = x.data < 0
    out = np.where(neg, np.expm1(np.minimum(x.data, 0.0)), x.data)
    return _make(out, (x,), lambda g: (g * np.where(neg, out + 1.0, 1.0),), "elu")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt of a negative value")
    r = np.sqrt(x.data)
    return _make(r, (x,), lambda g: (g * 0.5 / r,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (g * 2.0 * x.data,), "square")


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "negate")


def gelu(x: Tensor) -> Tensor:
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _make(out, (x,), backward, "gelu")


ELEMENTWISE = {
    "sigmoid": sigmoid,
    "elu": elu,
    "relu": relu,
    "tanh": tanh,
    "log": log,
    "negate": negate,
    "exp": exp,
    "sqrt": sqrt,
    "square": square,
    "gelu": gelu,
}


def elementwise(op_kind: str, x: Tensor) -> Tensor:
    if op_kind not in ELEMENTWISE:
        raise UsageError(f"unknown elementwise op '{op_kind}'")
    return ELEMENTWISE[op_kind](x)


# ---------------------------------------------------------------------------
# Binary (numpy broadcasting: axes align from the right, size-1 axes stretch)
# ---------------------------------------------------------------------------

def _broadcast_pair(a: ArrayLike, b: ArrayLike, op: str) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    return a, b


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def hadamard(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "hadamard")
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)), "hadamard")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _broadcast_pair(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)), "div")


BINARY = {"add": add, "sub": sub, "hadamard": hadamard, "div": div}


def binary(op_kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    if op_kind not in BINARY:
        raise UsageError(f"unknown binary op '{op_kind}'")
    return BINARY[op_kind](a, b)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(da, a.shape), unbroadcast(db, b.shape)

    return _make(out, (a, b), backward, "matmul")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of a C_in×H×W input with a C_out×C_in×kh×kw kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W input and 4-D kernel, got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}×{kw}")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    _, height, width = x.shape
    out_h = height + 2 * padding - kh + 1
    out_w = width + 2 * padding - kw + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv2d: output size {out_h}×{out_w} is empty")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward(g):
        d_kernel = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, i:i + out_h, j:j + out_w] += np.tensordot(kernel.data[:, :, i, j], g, axes=([0], [0]))
        d_x = d_padded[:, padding:padding + height, padding:padding + width] if padding else d_padded
        d_bias = g.sum(axis=(1, 2)) if bias is not None else None
        return d_x, d_kernel, d_bias

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# Softmax and reductions
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise UsageError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def _normalize_axis(axis: Axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise UsageError(f"axis {a} out of range for rank {ndim}")
        normalized.append(a % ndim)
    return tuple(sorted(normalized))


def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axes: Optional[Tuple[int, ...]], keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op_kind: str, x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axis(axis, x.ndim)
    if op_kind == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand_grad(g, x.shape, axes, keepdims).copy(),), "sum")

    if op_kind == "mean":
        count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (_expand_grad(g, x.shape, axes, keepdims) / count,), "mean")

    if op_kind == "max":
        if axes is not None and len(axes) != 1:
            raise UsageError("max reduces over one axis or all axes")
        out = x.data.max(axis=axes, keepdims=keepdims)
        mask = np.zeros_like(x.data)
        if axes is None:
            mask.reshape(-1)[np.argmax(x.data)] = 1.0
        else:
            idx = np.expand_dims(np.argmax(x.data, axis=axes[0]), axes[0])
            np.put_along_axis(mask, idx, 1.0, axis=axes[0])
        return _make(out, (x,), lambda g: (mask * _expand_grad(g, x.shape, axes, keepdims),), "max")

    raise UsageError(f"unknown reduction '{op_kind}'")


def pool_channel(kind: str, x: Tensor) -> Tensor:
    """Average or max over the channel axis of a C×H×W tensor, keeping a 1×H×W map."""
    if x.ndim != 3 or x.shape[0] < 1:
        raise ShapeError(f"pool_channel expects C×H×W, got {x.shape}")
    if kind == "avg":
        return reduce("mean", x, 0, keepdims=True)
    if kind == "max":
        return reduce("max", x, 0, keepdims=True)
    raise UsageError(f"unknown channel pooling '{kind}'")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}")
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid transpose axes {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty list")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("stack of an empty list")
    ref = tensors[0].shape
    if any(t.shape != ref for t in tensors):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % out.ndim
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), "stack")


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "slice")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"upsample expects C×H×W, got {x.shape}")
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),), "upsample")


SHAPE_OPS = {
    "concat": concat,
    "stack": stack,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
}


def shape_ops(kind: str, *args, **kwargs) -> Tensor:
    if kind not in SHAPE_OPS:
        raise UsageError(f"unknown shape op '{kind}'")
    return SHAPE_OPS[kind](*args, **kwargs)


# ---------------------------------------------------------------------------
# Normalization layers
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance kept outside the graph."""

    mean: Tensor
    var: Tensor
    momentum: float = 0.1

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean.data = (1.0 - m) * self.mean.data + m * batch_mean
        self.var.data = (1.0 - m) * self.var.data + m * batch_var


BN_EPSILON = 1e-5


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats,
                mode: str = "train", eps: float = BN_EPSILON) -> Tensor:
    """Batch normalization of one C×H×W sample.

    Train mode normalizes with the sample's own per-channel spatial statistics
    (biased variance) and folds them into ``running_stats``; eval mode uses the
    running statistics.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm2d expects C×H×W, got {x.shape}")
    if mode not in ("train", "eval"):
        raise UsageError(f"batchnorm2d mode must be 'train' or 'eval', got '{mode}'")
    train = mode == "train"
    if train:
        mu = x.data.mean(axis=(1, 2))
        var = x.data.var(axis=(1, 2))
        running_stats.update(mu, var)
    else:
        mu, var = running_stats.mean.data, running_stats.var.data
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu[:, None, None]) * inv[:, None, None]
    out = gamma.data[:, None, None] * x_hat + beta.data[:, None, None]
    count = x.shape[1] * x.shape[2]

    def backward(g):
        d_gamma = (g * x_hat).sum(axis=(1, 2))
        d_beta = g.sum(axis=(1, 2))
        d_hat = g * gamma.data[:, None, None]
        if train:
            d_x = (inv[:, None, None] / count) * (
                count * d_hat
                - d_hat.sum(axis=(1, 2), keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=(1, 2), keepdims=True)
            )
        else:
            d_x = d_hat * inv[:, None, None]
        return d_x, d_gamma, d_beta

    return _make(out, (x, gamma, beta), backward, "batchnorm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = square(centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W (+ b) for an N×in matrix or an in-vector."""
    if x.ndim == 1:
        out = matmul(reshape(x, (1, x.shape[0])), weight)
        out = reshape(out, (weight.shape[1],))
    else:
        out = matmul(x, weight)
    return out + bias if bias is not None else out
