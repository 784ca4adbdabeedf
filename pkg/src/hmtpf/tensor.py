"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op records its parents and a backward rule on the output node; calling
``backward`` on a scalar walks the recorded graph in reverse topological order
(the tape) and accumulates gradients into leaf tensors.

Broadcasting follows numpy semantics. Gradients of broadcast operands are
summed back to the operand shape, which covers the "vector over rows" case
used by ``linear``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method sugar -----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, scale (b is a float), gelu, relu, exp,
    silu, softplus, log."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs a second operand")
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(as_tensor(a), b)
    if op in _UNARY:
        return _UNARY[op](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# -- unary elementwise ----------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        return (g * d,)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)

    def bw(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _make(x * s, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    x = a.data
    out = x**p
    return _make(out, (a,), lambda g: (g * p * x ** (p - 1.0),))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"gelu": gelu, "relu": relu, "exp": exp, "silu": silu, "softplus": softplus, "log": log}


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch shapes differ, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Rows of ``x`` times ``W`` plus ``b`` broadcast over rows."""
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]} (W {W.shape})")
    y = matmul(x, W)
    if b is None:
        return y
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match output width {W.shape[1]}")
    return add(y, b)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data.astype(np.intp)
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64, copy=True), (a,), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")
    out = a.data[idx]
    flat = idx.reshape(-1)

    def bw(g):
        g2 = g.reshape(flat.size, -1)
        full = np.zeros((n, g2.shape[1]))
        # bincount per column is deterministic and much faster than add.at
        for c in range(g2.shape[1]):
            full[:, c] = np.bincount(flat, weights=g2[:, c], minlength=n)
        return (full.reshape(a.shape),)

    return _make(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc} (shapes {[t.shape for t in ts]})") from None
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {src} -> {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),))


# -- reductions -----------------------------------------------------------

def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce with ``sum``, ``mean`` or ``max``. ``max`` routes the gradient to the
    first maximal position of each slice."""
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise DimensionError(f"reduce: axis {axis} out of range for rank {a.ndim}")
        axis = axis % a.ndim
        if a.shape[axis] == 0:
            raise DimensionError(f"reduce: axis {axis} is empty")
    elif a.size == 0:
        raise DimensionError("reduce: empty tensor")

    if op == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

    elif op == "mean":
        n = a.size if axis is None else a.shape[axis]
        out = a.data.mean(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, a.shape).copy(),)

    elif op == "max":
        if axis is None:
            flat = int(np.argmax(a.data))
            out = a.data.reshape(-1)[flat]
            out = np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)

            def bw(g):
                full = np.zeros(a.size)
                full[flat] = np.asarray(g).reshape(-1)[0]
                return (full.reshape(a.shape),)

        else:
            am = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            out = np.take_along_axis(a.data, am, axis=axis)
            if not keepdims:
                out = np.squeeze(out, axis=axis)

            def bw(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                full = np.zeros_like(a.data)
                np.put_along_axis(full, am, g, axis=axis)
                return (full,)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def seq_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every channel (column) over the sequence axis (axis 0)."""
    x = a.data
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    s = np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    y = xc / s if eps > 0 else np.divide(xc, s, out=np.zeros_like(xc), where=s > 0)

    def bw(g):
        gm = g.mean(axis=0, keepdims=True)
        gy = (g * y).mean(axis=0, keepdims=True)
        safe = np.where(s > 0, s, 1.0)
        return ((g - gm - y * gy) / safe,)

    return _make(y, (a,), bw)


# -- backward -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients accumulate across calls; call ``zero_grad`` (or set
    ``grad = None``) between independent backward passes.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), loss.shape).copy()
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- gradient checking ----------------------------------------------------

def grad_check_report(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    coords: Sequence[tuple[int, int]] | None = None,
    kink_tol: float = 1e-2,
    noise_floor: float = 1e-6,
) -> dict:
    """Compare backprop gradients of ``f()`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    ``coords`` selects (tensor index, flat index) pairs; default is every entry.
    A coordinate is flagged as a kink (and excluded) when its forward and
    backward one-sided differences disagree by more than ``kink_tol`` relative.
    Relative errors use ``noise_floor * max(1, |f|)`` as the smallest
    denominator: below that, central differences are mostly roundoff.
    """
    if isinstance(params, Tensor):
        params = [params]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar function")
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad = None
        p.requires_grad = s
    if coords is None:
        coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]

    f0 = float(loss.data)
    floor = noise_floor * max(1.0, abs(f0))
    worst = 0.0
    flagged = []
    errors = []
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
            fd = (fp - fm) / (2 * eps)
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), floor):
                flagged.append((i, j))
                continue
            a = analytic[i].reshape(-1)[j]
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            errors.append(err)
            worst = max(worst, err)
    return {"max_rel_error": worst, "errors": errors, "flagged": flagged, "checked": len(errors)}


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    coords: Sequence[tuple[int, int]] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return grad_check_report(f, params, eps, coords)["max_rel_error"]


def sample_coords(params: Sequence[Tensor], n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``n`` coordinates drawn uniformly over all entries of ``params``."""
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(offsets[-1], size=min(n, int(offsets[-1])), replace=False)
    out = []
    for k in np.sort(picks):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        out.append((i, int(k - offsets[i])))
    return out
