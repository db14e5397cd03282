"""Dense tensors with eager tape-based reverse-mode differentiation.

Every operation records its inputs and a backward rule on the output
tensor; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.  Shapes must match exactly for binary operations; the
only broadcasting allowed is a Python scalar (or 0-d tensor) against a
tensor.
"""

from __future__ import annotations

import contextlib
import math
import struct
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "ConfigError",
    "tensor",
    "zeros",
    "ones",
    "set_default_dtype",
    "get_default_dtype",
    "debug_mode",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "exp",
    "log",
    "sqrt",
    "relu",
    "gelu",
    "sigmoid",
    "minimum",
    "maximum",
    "clip",
    "matmul",
    "linear",
    "softmax",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "pad",
    "take",
    "getitem",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "nearest_upsample",
    "save_tensors",
    "load_tensors",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, reused graph, ...)."""


class ConfigError(ValueError):
    """Invalid operator configuration (group count, stride, ...)."""


_DEFAULT_DTYPE = np.float64
_DEBUG = False
_GRAD_ENABLED = True
_FLOP_HOOK: Callable[[str, float], None] | None = None
_KINK_LOG: list | None = None


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward result for NaN/Inf while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _count_flops(kind: str, amount: float) -> None:
    if _FLOP_HOOK is not None:
        _FLOP_HOOK(kind, amount)


@contextlib.contextmanager
def flop_hook(fn: Callable[[str, float], None]):
    global _FLOP_HOOK
    prev, _FLOP_HOOK = _FLOP_HOOK, fn
    try:
        yield
    finally:
        _FLOP_HOOK = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch masks of piecewise ops (relu, min/max, clip) run while active."""
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _log_mask(mask: np.ndarray) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append(np.packbits(mask).tobytes())


class Tensor:
    """N-dimensional real array with an optional node on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1 or self.ndim > 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from any tensor that requires grad")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild it before calling again")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = Tensor(g.copy(), dtype=g.dtype)
                else:
                    node.grad = Tensor(node.grad.data + g, dtype=g.dtype)
                continue
            if node._backward is None:
                raise GraphError(f"graph through {node._op} was already consumed by an earlier backward")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand broadcast against a tensor
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _reduce_to(ga, a), _reduce_to(-ga * out, b)

    return _make(out, (a, b), backward, "div")


def minimum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "minimum")
    pick_a = a.data <= b.data
    _log_mask(pick_a)

    def backward(g):
        return _reduce_to(np.where(pick_a, g, 0.0), a), _reduce_to(np.where(pick_a, 0.0, g), b)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def maximum(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "maximum")
    pick_a = a.data >= b.data
    _log_mask(pick_a)

    def backward(g):
        return _reduce_to(np.where(pick_a, g, 0.0), a), _reduce_to(np.where(pick_a, 0.0, g), b)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


# -- elementwise unary -------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def pow(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data ** exponent

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(out, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_mask(mask)
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    _log_mask(keep)
    return _make(out, (x,), lambda g: (g * keep,), "clip")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must be identical."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    _count_flops("matmul", 2.0 * a.data.size * b.shape[-1])

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out), bias is (out,)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not fit weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    _count_flops("matmul", 2.0 * x2.size * weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(lead + (weight.shape[1],)), parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _count_flops("softmax", 5.0 * x.size)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


# -- reductions --------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` holds one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(b < 0 or a < 0 for b, a in widths):
        raise ShapeError(f"pad: widths {widths} invalid for shape {x.shape}")
    out = np.pad(x.data, widths)
    index = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return _make(out, (x,), lambda g: (g[index],), "pad")


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis); the result is a copy."""
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not (isinstance(item, (int, slice, np.integer)) or item is Ellipsis):
            raise TypeError("getitem supports ints, slices and Ellipsis; use take() for index arrays")
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(out, (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), backward, "take")


# -- normalization -----------------------------------------------------------

def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize over one (channel) axis, then scale and shift per channel."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: affine params {weight.shape}/{bias.shape} vs channels {c}")
    bshape = [1] * x.ndim
    bshape[axis] = c
    w = weight.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * w + bias.data.reshape(bshape)
    _count_flops("norm", 8.0 * x.size)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gw = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * w
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all axes except 1 (channels).

    In training mode the running statistics arrays are updated in place
    (unbiased variance, as is conventional).
    """
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"batch_norm: affine params {weight.shape}/{bias.shape} vs channels {c}")
    red = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = c
    w = weight.data.reshape(bshape)
    _count_flops("norm", 4.0 * x.size)
    if training:
        n = x.size // c
        mu = x.data.mean(axis=red, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=red, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (n / max(n - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * w + bias.data.reshape(bshape)

        def backward(g):
            gw = (g * xhat).sum(axis=red)
            gb = g.sum(axis=red)
            gx_hat = g * w
            gx = inv * (gx_hat - gx_hat.mean(axis=red, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=red, keepdims=True))
            return gx, gw, gb

        return _make(out, (x, weight, bias), backward, "batch_norm")

    inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
    xhat = (x.data - running_mean.reshape(bshape)) * inv
    out = xhat * w + bias.data.reshape(bshape)

    def backward_eval(g):
        return g * w * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, weight, bias), backward_eval, "batch_norm")


# -- convolution -------------------------------------------------------------

def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation on NCHW input with (C_out, C_in/groups, k, k) weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: square kernels only, got {weight.shape}")
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"conv2d: {groups} groups do not divide C_in={cin}, C_out={cout}")
    if cin_g != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cin_g * groups} input channels, input has {cin}")
    if stride < 1 or k < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride}, kernel={k}, padding={padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {cout} output channels")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    _count_flops("conv", 2.0 * b * cout * ho * wo * cin_g * k * k)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd

    if k == 1:
        out, back = _conv_pointwise(xp, wd, stride, groups, ho, wo)
    elif groups == cin == cout:
        out, back = _conv_depthwise(xp, wd, stride, ho, wo)
    else:
        out, back = _conv_dense(xp, wd, stride, groups, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp, gw = back(g)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward, "conv2d")


def _conv_pointwise(xp, wd, stride, groups, ho, wo):
    xs = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
    b, cin = xs.shape[:2]
    cout = wd.shape[0]
    cg_in, cg_out = cin // groups, cout // groups
    w2 = wd.reshape(groups, cg_out, cg_in)
    xs_g = xs.reshape(b, groups, cg_in, ho * wo)
    out = np.matmul(w2[None], xs_g).reshape(b, cout, ho, wo)

    def back(g):
        g_g = g.reshape(b, groups, cg_out, ho * wo)
        gw = np.matmul(g_g, np.swapaxes(xs_g, -1, -2)).sum(axis=0).reshape(wd.shape)
        gxs = np.matmul(np.swapaxes(w2, -1, -2)[None], g_g).reshape(b, cin, ho, wo)
        gxp = np.zeros_like(xp)
        gxp[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride] = gxs
        return gxp, gw

    return out, back


def _conv_depthwise(xp, wd, stride, ho, wo):
    k = wd.shape[-1]
    c = xp.shape[1]
    hi, wi = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((xp.shape[0], c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + hi : stride, j : j + wi : stride] * wd[:, 0, i, j].reshape(1, c, 1, 1)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(k):
            for j in range(k):
                sl = (slice(None), slice(None), slice(i, i + hi, stride), slice(j, j + wi, stride))
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[sl])
                gxp[sl] += g * wd[:, 0, i, j].reshape(1, c, 1, 1)
        return gxp, gw

    return out, back


def _conv_dense(xp, wd, stride, groups, ho, wo):
    # im2col laid out as (B, C, k, k, Ho*Wo) so both products stay in NCHW order
    cout, cg_in, k, _ = wd.shape
    b, cin = xp.shape[:2]
    cg_out = cout // groups
    hi, wi = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    cols = np.empty((b, cin, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + hi : stride, j : j + wi : stride]
    cols = cols.reshape(b, groups, cg_in * k * k, ho * wo)
    w2 = wd.reshape(groups, cg_out, cg_in * k * k)
    out = np.matmul(w2[None], cols).reshape(b, cout, ho, wo)

    def back(g):
        g2 = g.reshape(b, groups, cg_out, ho * wo)
        gw = np.matmul(g2, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
        dcols = np.matmul(np.swapaxes(w2, -1, -2)[None], g2).reshape(b, cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + hi : stride, j : j + wi : stride] += dcols[:, :, i, j]
        return gxp, gw

    return out, back


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel of an NCHW map ``factor`` times along H and W."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample")


# -- checkpoint format -------------------------------------------------------

_MAGIC = b"MWCA1"


def save_tensors(path, tensors: dict[str, "Tensor | np.ndarray"]) -> None:
    """Write named tensors: magic, then per record name length, name, rank, dims, float64 data.

    All integers are unsigned 64-bit little-endian; data is little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name, value in tensors.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a tensor checkpoint (bad magic)")
    pos = len(_MAGIC)
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (nlen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
        out[name] = arr
    return out


# -- finite-difference oracle ------------------------------------------------

def _kink_pattern(fn: Callable[[], Tensor]) -> tuple[float, tuple]:
    with no_grad(), record_kinks() as log:
        value = float(fn().data)
    return value, tuple(log)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, index: tuple, eps: float = 1e-5, base_pattern=None):
    """Central difference of scalar ``fn()`` w.r.t. one entry of ``param``.

    Returns ``(derivative, smooth)`` where ``smooth`` is False when a
    piecewise op switched branch inside the stencil.  ``base_pattern`` is the
    kink pattern of the unperturbed point; it is recomputed when omitted.
    """
    original = param.data[index]
    try:
        param.data[index] = original + eps
        up, up_pattern = _kink_pattern(fn)
        param.data[index] = original - eps
        down, down_pattern = _kink_pattern(fn)
    finally:
        param.data[index] = original
    if base_pattern is None:
        base_pattern = _kink_pattern(fn)[1]
    smooth = up_pattern == down_pattern == base_pattern
    return (up - down) / (2.0 * eps), smooth


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-4,
    budget: int | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of each parameter tensor is ``max|analytic - numeric|``
    divided by the largest magnitude among the checked entries of either,
    floored at ``floor`` so that gradients which vanish identically (such as
    a shift shared by every softmax logit) compare in absolute terms.

    Entry selection: every entry by default; ``samples`` random entries per
    tensor; or, with ``budget``, that many entries in total, each drawn by
    picking a tensor uniformly and then an entry.  Entries whose stencil
    crosses a kink of a piecewise op are replaced by fresh draws.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [p.grad.data.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    _, base = _kink_pattern(fn)

    if budget is not None:
        wanted = [0] * len(params)
        for i in rng.integers(len(params), size=budget):
            wanted[i] += 1
    elif samples is None:
        wanted = [p.size for p in params]
    else:
        wanted = [min(samples, p.size) for p in params]

    worst = 0.0
    for p, ga, want in zip(params, analytic, wanted):
        if want == 0:
            continue
        order = rng.permutation(p.size)
        a_vals, n_vals = [], []
        for flat in order:
            if len(a_vals) >= want:
                break
            idx = np.unravel_index(flat, p.shape)
            num, smooth = numeric_grad(fn, p, idx, eps, base)
            if not smooth:
                continue
            a_vals.append(ga[idx])
            n_vals.append(num)
        if not a_vals:
            continue
        a_arr, n_arr = np.asarray(a_vals), np.asarray(n_vals)
        scale = max(np.abs(a_arr).max(), np.abs(n_arr).max(), floor)
        worst = max(worst, float(np.abs(a_arr - n_arr).max() / scale))
    return worst
