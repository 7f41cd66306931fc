"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps one ndarray plus the closure needed to push gradients back to its
parents. Recording an operation builds the tape implicitly as a DAG; calling
``backward()`` on a scalar walks it once in reverse topological order. The tape
lives for exactly one forward+backward pass, there is no retained graph.

Only float32 and float64 are supported and the two never mix silently: binary
ops require matching dtypes (python scalars are cast to the tensor's dtype).
Every operation checks its output for NaN/Inf and raises NumericalError rather
than letting non-finite values propagate. All ops are pure functions of their
inputs, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

# Module-level switches. Finite checks cost one isfinite pass per op; they stay
# on by default because silent NaN propagation is much more expensive to debug.
FINITE_CHECKS = True

_GRAD_ENABLED = True

_FLOAT_DTYPES = (np.float32, np.float64)


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(name, arr):
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {name}")


def _as_array(data):
    arr = np.asarray(data)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        _check_finite("Tensor", self.data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ---- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, opname):
        out = Tensor.__new__(Tensor)
        out.data = data
        _check_finite(opname, data)
        out.grad = None
        record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = record
        out._parents = tuple(parents) if record else ()
        out._backward = backward if record else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        """A new leaf tensor sharing this tensor's values, cut from the tape."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- backward pass --------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if self._parents is None:
            raise RuntimeError("backward() called twice; the tape is single-use")

        # Iterative topological sort; the graph can be deeper than the default
        # python recursion limit for the full three-stage pipeline.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents or ():
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # Release the closure so the tape really is single-use.
                node._backward = None
                node._parents = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def _coerce(value, like):
    """Make ``value`` a Tensor with the same dtype as ``like``."""
    if isinstance(value, Tensor):
        if value.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {value.dtype} vs {like.dtype}")
        return value
    arr = np.asarray(value, dtype=like.dtype)
    return Tensor(arr)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- elementwise binary ops ---------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(-g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.data.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "div")


def neg(a):
    def backward(g):
        a._accum(-g)

    return Tensor._from_op(-a.data, (a,), backward, "neg")


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "maximum")


# ---- elementwise unary ops ----------------------------------------------------


def relu(a):
    mask = a.data > 0

    def backward(g):
        a._accum(np.where(mask, g, 0.0))

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def sigmoid(a):
    # tanh form is exact and overflow-free at both ends.
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward, "sigmoid")


def softplus(a):
    # log(1 + exp(x)) computed stably for large |x|.
    out_data = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)

    def backward(g):
        a._accum(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return Tensor._from_op(out_data, (a,), backward, "softplus")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), backward, "exp")


def sqrt(a):
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (a,), backward, "sqrt")


def abs_(a):
    sign = np.sign(a.data)

    def backward(g):
        a._accum(g * sign)

    return Tensor._from_op(np.abs(a.data), (a,), backward, "abs")


def clamp(a, lo=None, hi=None):
    """Clamp values to [lo, hi]; gradient passes only where not clipped."""
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def backward(g):
        a._accum(np.where(inside, g, 0.0))

    return Tensor._from_op(out_data, (a,), backward, "clamp")


def where(cond, a, b):
    """Select between two tensors with a constant boolean mask."""
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        a._accum(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        b._accum(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "where")


# ---- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g / count, a.data.shape).copy())

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "mean")


def max_(a, axis=None, keepdims=False):
    """Max reduction; the gradient flows to the first attaining element."""
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    if axis is None:
        flat_idx = int(a.data.argmax())

        def backward(g):
            grad = np.zeros_like(a.data)
            grad.flat[flat_idx] = np.asarray(g).reshape(())
            a._accum(grad)

    else:
        if isinstance(axis, tuple):
            raise ValueError("max reduction supports a single axis")
        idx = a.data.argmax(axis=axis, keepdims=True)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.zeros_like(a.data)
            np.put_along_axis(grad, idx, g, axis)
            a._accum(grad)

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "max")


# ---- shape ops ----------------------------------------------------------------


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return Tensor._from_op(out_data, (a,), backward, "transpose")


def slice_(a, key):
    out_data = a.data[key]

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[key] = g
        a._accum(grad)

    return Tensor._from_op(out_data, (a,), backward, "slice")


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.dtype != ref.dtype:
            raise TypeError("concat requires matching dtypes")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def pad_zero(a, pad_width):
    """Zero padding; ``pad_width`` follows np.pad's per-axis (before, after) form."""
    out_data = np.pad(a.data, pad_width)
    slices = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, a.data.shape))

    def backward(g):
        a._accum(g[slices])

    return Tensor._from_op(out_data, (a,), backward, "pad")


# ---- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Matrix product of 2-D or identically batched >=3-D tensors."""
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim >= 3 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError("matmul batch dims must match exactly")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        a._accum(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accum(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def constant(data, dtype=np.float64):
    """A non-differentiable tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype))
