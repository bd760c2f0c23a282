"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable op records its
operands and a closure mapping the output gradient to operand gradients; the
graph is rebuilt on each forward pass and walked in reverse topological order
by :meth:`Tensor.backward`.

Broadcasting is deliberately restricted: binary ops need equal shapes, except
that either operand may be a scalar (a Python number or a shape-``()``
tensor).  Row broadcasting must be spelled out with :func:`broadcast_rows`
or :func:`linear`.
"""

import contextlib

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

DEFAULT_DTYPE = np.float64
NORM_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------ properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # ------------------------------------------------------------ operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # ------------------------------------------------------------ backward
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Leaf gradients accumulate across calls; call ``zero_grad`` between
        independent passes.  Intermediate gradients are recomputed each call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        order = topological_order(self)
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + grad if self.is_leaf else np.array(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad += g


def topological_order(root):
    """Nodes reachable from ``root`` such that operands precede results."""
    order, seen = [], set()
    stack = [(root, False)]
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


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _result(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _binary_operands(a, b, opname):
    like = a if isinstance(a, Tensor) else b
    a, b = _as_tensor(a, like), _as_tensor(b, like)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g, shape):
    # only the scalar case can occur, see _binary_operands
    return g.sum().reshape(shape) if g.shape != shape else g


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a, b = _binary_operands(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), back, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    mask = a.data > 0  # subgradient 0 at the kink

    def back(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), back, "relu")


def exp(a):
    y = np.exp(a.data)

    def back(g):
        return (g * y,)

    return _result(y, (a,), back, "exp")


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")

    def back(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), back, "log")


_UNARY = {"relu": relu, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op, a, b=None):
    """Dispatch one of add, mul, sub, relu, exp, log, neg by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------ reductions


def tsum(a):
    def back(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,), back, "sum")


def mean(a):
    n = a.size

    def back(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,), back, "mean")


# ------------------------------------------------------------------ linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), back, "matmul")


def bmm(a, b):
    """Batched product of ``[B, m, k]`` and ``[B, k, n]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")

    def back(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(a.data @ b.data, (a, b), back, "bmm")


def linear(x, w, b=None):
    """``x @ w + b`` with the bias row added to every row of ``x``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    y = x.data @ w.data
    if b is not None:
        y += b.data

    def back(g):
        gx, gw = g @ w.data.T, x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, back, "linear")


# ------------------------------------------------------------------ row-wise kernels


def _rows(a):
    return a.data.reshape(-1, a.shape[-1])


def softmax_rows(a):
    """Softmax along the last axis with max subtraction."""
    y = kernels.softmax_rows(_rows(a)).reshape(a.shape)

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, a.shape[-1]))
        return (kernels.softmax_rows_backward(y.reshape(-1, a.shape[-1]), g2).reshape(a.shape),)

    return _result(y, (a,), back, "softmax_rows")


def log_softmax_rows(a):
    y = kernels.log_softmax_rows(_rows(a)).reshape(a.shape)

    def back(g):
        g2 = np.ascontiguousarray(g.reshape(-1, a.shape[-1]))
        return (kernels.log_softmax_rows_backward(y.reshape(-1, a.shape[-1]), g2).reshape(a.shape),)

    return _result(y, (a,), back, "log_softmax_rows")


def layer_norm(a, gain, bias, eps=1e-5):
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    y, xhat, rstd = kernels.layer_norm(_rows(a), gain.data, bias.data, float(eps))

    def back(g):
        gx, gg, gb = kernels.layer_norm_backward(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gain.data)
        return gx.reshape(a.shape), gg, gb

    return _result(y.reshape(a.shape), (a, gain, bias), back, "layer_norm")


def l2_normalize(a, eps=NORM_EPS):
    """Scale each last-axis slice to unit Euclidean norm.

    Rows with norm below ``eps`` raise :class:`DegenerateInputError`. Non-finite
    rows pass through as NaN so that callers can report them.
    """
    rows = _rows(a)
    norms = kernels.row_norms(rows)
    bad = np.flatnonzero(norms < eps)
    if bad.size:
        raise DegenerateInputError(f"l2_normalize: row {int(bad[0])} has norm {norms[bad[0]]:.3g} < {eps:g}")
    y = rows / norms[:, None]

    def back(g):
        return (kernels.l2_normalize_backward(y, norms, np.ascontiguousarray(g.reshape(y.shape))).reshape(a.shape),)

    return _result(y.reshape(a.shape), (a,), back, "l2_normalize")


# ------------------------------------------------------------------ shape plumbing


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _result(np.ascontiguousarray(out), (a,), back, "reshape")


def transpose(a, axes=None):
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose without axes needs a matrix, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), back, "transpose")


def take(a, index, axis=0):
    """Select one slice ``index`` along ``axis`` (the axis is dropped)."""
    out = np.ascontiguousarray(np.take(a.data, index, axis=axis))

    def back(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (a,), back, "take")


def gather_rows(a, indices):
    """Rows ``a[indices]`` of a matrix; repeated indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result(np.ascontiguousarray(a.data[indices]), (a,), back, "gather_rows")


def stack(tensors, axis=0):
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=axis)) for i in range(len(tensors)))

    return _result(out, tuple(tensors), back, "stack")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back, "concat")


def broadcast_rows(a, k):
    """Repeat a vector ``[d]`` (or a ``[1, d]`` row) into a ``[k, d]`` matrix."""
    if a.ndim == 2 and a.shape[0] == 1:
        row = a.data[0]
    elif a.ndim == 1:
        row = a.data
    else:
        raise ShapeError(f"broadcast_rows: expected [d] or [1, d], got {a.shape}")
    out = np.repeat(row[None, :], k, axis=0)

    def back(g):
        return (g.sum(axis=0).reshape(a.shape),)

    return _result(out, (a,), back, "broadcast_rows")


def scalar_like(value, like):
    return Tensor(np.asarray(value, dtype=like.dtype))

