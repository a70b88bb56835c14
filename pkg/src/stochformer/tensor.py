"""Dense float64 tensors with a dynamic tape for reverse-mode differentiation.

The graph is rebuilt on every forward pass. Elementwise operands must either
share a shape or one shape must be a trailing suffix of the other (leading-batch
broadcasting); anything else needs an explicit :meth:`Tensor.expand` or
:meth:`Tensor.reshape`.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, NumericError

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- graph ------------------------------------------------------------
    def backward(self, retain_graph: bool = False):
        """Propagate d(self)/d(node) to every reachable node that requires grad.

        Gradients accumulate into ``.grad``; call :meth:`zero_grad` between
        steps. Unless ``retain_graph`` is set the tape is released afterwards.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        topo = _topological_order(self)
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
        if not retain_graph:
            for node in topo:
                node._parents = ()
                node._backward = None

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        _check_elementwise(self, other, "add")
        sa, sb = self.shape, other.shape
        return _result(self.data + other.data, (self, other),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        _check_elementwise(self, other, "sub")
        sa, sb = self.shape, other.shape
        return _result(self.data - other.data, (self, other),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        other = _wrap(other)
        _check_elementwise(self, other, "mul")
        a, b = self.data, other.data
        return _result(a * b, (self, other),
                       lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        _check_elementwise(self, other, "div")
        a, b = self.data, other.data
        return _result(a / b, (self, other),
                       lambda g: (_unbroadcast(g / b, a.shape),
                                  _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("only constant exponents are supported")
        a = self.data
        out = a ** exponent
        return _result(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} into {shape}") from exc
        return _result(out, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def expand(self, *shape):
        """Explicit numpy-style broadcast to ``shape``."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = np.broadcast_to(self.data, shape).copy()
        except ValueError as exc:
            raise DimensionError(f"cannot expand {src} to {shape}") from exc
        lead = len(shape) - len(src)

        def back(g):
            g = g.sum(axis=tuple(range(lead))) if lead else g
            axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
            if axes:
                g = g.sum(axis=axes, keepdims=True)
            return (g,)

        return _result(out, (self,), back)

    def take(self, indices, axis: int):
        """Gather along ``axis`` with an integer index array (repeats allowed)."""
        idx = np.asarray(indices, dtype=np.intp)
        shape = self.shape
        axis = axis % self.ndim
        out = np.take(self.data, idx, axis=axis)

        def back(g):
            full = np.zeros(shape)
            # move the gathered axis block to the front for np.add.at
            g_moved = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
            full_moved = np.moveaxis(full, axis, 0)
            np.add.at(full_moved, idx, g_moved)
            return (full,)

        return _result(out, (self,), back)

    def __getitem__(self, key):
        shape = self.shape
        out = self.data[key]

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        return _result(out, (self,), back)

    # -- elementwise functions -------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return _result(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _result(out, (self,), lambda g: (g * 0.5 / out,))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if not _suffix_compatible(a.shape, b.shape):
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
            "(only leading-batch broadcasting is allowed)")


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> list:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


# -- free functions -----------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading axes must agree, or one operand may be a plain matrix that is
    shared across the other's batch.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if a.ndim == 2 and g.ndim > 2:
            ga = ga.reshape((-1,) + A.shape).sum(axis=0)
        if b.ndim == 2 and g.ndim > 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(A @ B, (a, b), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), back)


def normal_cdf(x):
    """Standard normal CDF through erfc so the far left tail keeps precision."""
    return 0.5 * special.erfc(-np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x), exact (no tanh approximation)."""
    x = _wrap(x)
    a = x.data
    cdf = normal_cdf(a)
    pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return _result(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def finite_difference_check(f, x: Tensor, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between the taped gradient of ``f`` at ``x`` and central differences.

    ``f`` maps ``x`` to a scalar Tensor. It must be deterministic across calls,
    so stochastic layers inside it need a frozen RngStream. ``indices`` limits
    the check to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if not np.all(np.isfinite(y.data)):
        raise NumericError("function value is not finite at the base point")
    y.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.reshape(x.shape).copy()
    x.grad = None
    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            up, down = orig + eps, orig - eps
            flat[i] = up
            fp = f(x).item()
            flat[i] = down
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"function value is not finite near coordinate {i}")
            numeric = (fp - fm) / (up - down)  # realized step, not 2*eps
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    x.requires_grad = was
    return worst
