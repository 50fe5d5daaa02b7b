"""Dense float64 tensors with reverse-mode automatic differentiation.

Arrays are numpy float64 throughout. Graphs are built eagerly: each op output
keeps its parent tensors plus a closure computing the vector-Jacobian product,
and backward() replays the whole record in reverse topological order. The op
set is exactly what the elastic denoiser needs, nothing more.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """An input value is outside the operation's domain."""


class ContractError(RuntimeError):
    """A caller broke an API contract (non-scalar loss, non-deterministic f, ...)."""


class NumericError(ArithmeticError):
    """A forward operation produced a NaN or infinity."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_vjp", "_opaque")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._opaque: tuple = ()

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all math lives in the module-level functions below
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _op(name: str, values: np.ndarray, parents: tuple, vjp, opaque: tuple = ()) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{name} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._opaque = opaque
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = parents if opaque else ()
        out._vjp = None
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Invert numpy broadcasting: reduce gradient g down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _op("add", values, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _op("sub", values, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return _sum_to_shape(g * b.values, a.shape), _sum_to_shape(g * a.values, b.shape)

    return _op("mul", values, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _op("neg", -a.values, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    values = a.values @ b.values

    def vjp(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _op("matmul", values, (a, b), vjp)


def transpose_last(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.values.ndim < 2:
        raise ShapeError(f"transpose_last: operand must be at least 2-D, got {a.shape}")
    return _op("transpose_last", np.swapaxes(a.values, -1, -2).copy(), (a,),
               lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# nonlinearities

def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        values = 1.0 / (1.0 + np.exp(-a.values))

    def vjp(g):
        return (g * values * (1.0 - values),)

    return _op("sigmoid", values, (a,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def _gelu_np(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x2 * x)))


def _gelu_grad_np(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def gelu(a) -> Tensor:
    """GELU with the tanh approximation."""
    a = _as_tensor(a)

    def vjp(g):
        return (g * _gelu_grad_np(a.values),)

    return _op("gelu", _gelu_np(a.values), (a,), vjp)


def softmax_last(a) -> Tensor:
    """Softmax over the last axis (shift-invariant, max-subtracted)."""
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * values).sum(axis=-1, keepdims=True)
        return ((g - dot) * values,)

    return _op("softmax_last", values, (a,), vjp)


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance; no learned affine."""
    a = _as_tensor(a)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def vjp(g):
        m1 = g.mean(axis=-1, keepdims=True)
        m2 = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - m1 - xhat * m2) * inv,)

    return _op("layer_norm", xhat, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions

def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _op("mean_all", np.asarray(a.values.mean()), (a,), vjp)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.shape),)

    return _op("sum_all", np.asarray(a.values.sum()), (a,), vjp)


def mean_axis(a, axis: int = -2) -> Tensor:
    """Mean over one axis, keepdims (used to pool router features over tokens)."""
    a = _as_tensor(a)
    if a.values.ndim < 2:
        raise ShapeError(f"mean_axis: operand must be at least 2-D, got {a.shape}")
    n = a.shape[axis]

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape),)

    return _op("mean_axis", a.values.mean(axis=axis, keepdims=True), (a,), vjp)


def sum_last(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        return (np.broadcast_to(g, a.shape),)

    return _op("sum_last", a.values.sum(axis=-1, keepdims=True), (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops

def col_slice(a, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) of the last axis."""
    a = _as_tensor(a)
    width = a.shape[-1]
    if not (0 <= start < stop <= width):
        raise DomainError(f"col_slice: range [{start}, {stop}) invalid for width {width}")
    values = a.values[..., start:stop].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[..., start:stop] = g
        return (full,)

    return _op("col_slice", values, (a,), vjp)


def row_slice(a, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) of the second-to-last axis."""
    a = _as_tensor(a)
    if a.values.ndim < 2:
        raise ShapeError(f"row_slice: operand must be at least 2-D, got {a.shape}")
    height = a.shape[-2]
    if not (0 <= start < stop <= height):
        raise DomainError(f"row_slice: range [{start}, {stop}) invalid for height {height}")
    values = a.values[..., start:stop, :].copy()

    def vjp(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[..., start:stop, :] = g
        return (full,)

    return _op("row_slice", values, (a,), vjp)


def mask_mul(a, mask) -> Tensor:
    """Multiply by a constant mask; no gradient flows into the mask."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    try:
        if np.broadcast_shapes(a.shape, m.shape) != a.shape:
            raise ShapeError(f"mask_mul: mask {m.shape} does not broadcast onto {a.shape}")
    except ValueError:
        raise ShapeError(f"mask_mul: mask {m.shape} does not broadcast onto {a.shape}") from None

    def vjp(g):
        return (g * m,)

    return _op("mask_mul", a.values * m, (a,), vjp)


def concat_last(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_last: need at least one operand")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shapes differ, {parts[0].shape} vs {p.shape}")
    values = np.concatenate([p.values for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _op("concat_last", values, tuple(parts), vjp)


def broadcast_rows(v, rows: int) -> Tensor:
    """Tile a [1, N] row vector into [rows, N]."""
    v = _as_tensor(v)
    if v.values.ndim < 2 or v.shape[-2] != 1:
        raise ShapeError(f"broadcast_rows: expected a row vector [..., 1, N], got {v.shape}")
    values = np.repeat(v.values, rows, axis=-2)

    def vjp(g):
        return (g.sum(axis=-2, keepdims=True),)

    return _op("broadcast_rows", values, (v,), vjp)


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks the reverse pass entirely.

    The input is remembered as an FD-opaque edge so grad_check can flag every
    parameter whose analytic gradient deliberately disagrees with a finite
    difference through this node.
    """
    a = _as_tensor(a)
    return _op("stop_gradient", a.values.copy(), (), None, opaque=(a,))


# ---------------------------------------------------------------------------
# reverse pass

def _topo(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
    """Reverse-accumulate d(loss)/d(tensor) for everything reachable from loss.

    Gradients are rebuilt from scratch on every call (repeated calls are
    idempotent). Each reachable tensor with requires_grad gets .grad set; when
    `wrt` is given, returns the gradient arrays in that order, with zeros for
    tensors the loss does not depend on.
    """
    if loss.values.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    order = _topo(loss)
    grads: dict = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    for node in order:
        if node.requires_grad:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.values) if g is None else np.asarray(g, dtype=np.float64)
    if wrt is not None:
        return [np.zeros_like(t.values) + grads.get(id(t), 0.0) for t in wrt]
    return grads


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference comparison."""
    max_rel_err: float
    compared: int
    excluded_opaque: int
    excluded_crossings: int
    worst: Optional[tuple]  # (param_name, flat_index, analytic, numeric, rel_err)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.compared > 0 and self.max_rel_err < tol


def _split_output(out):
    if isinstance(out, tuple):
        loss, sig = out
    else:
        loss, sig = out, None
    if not isinstance(loss, Tensor) or loss.values.shape != ():
        raise ContractError("grad_check: f must return a scalar Tensor (optionally with a signature)")
    return loss, sig


def opaque_tainted(loss: Tensor) -> set:
    """ids of every tensor feeding an FD-opaque edge reachable from `loss`."""
    tainted: set = set()
    stack = []
    for node in _topo(loss):
        stack.extend(node._opaque)
    seen = set()
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        tainted.add(id(n))
        stack.extend(n._parents)
        stack.extend(n._opaque)
    return tainted


def grad_check(f: Callable, params: Sequence[Tensor], h: float = 1e-6,
               num_coords: int = 20, rng=None, names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central finite differences.

    f rebuilds its graph from `params` on each call and returns a scalar Tensor,
    optionally paired with a hashable decision signature. Relative error per
    coordinate is |a - n| / max(1, |a|, |n|). Coordinates of parameters tainted
    by an FD-opaque edge are excluded up front (their count is the total number
    of scalar entries in those parameters); coordinates whose +/-h probes flip
    the decision signature are excluded as threshold crossings.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    loss0, sig0 = _split_output(f())
    loss1, sig1 = _split_output(f())
    if loss0.values.tobytes() != loss1.values.tobytes() or sig0 != sig1:
        raise ContractError("grad_check: f is not deterministic")
    analytic = backward(loss0, wrt=params)
    tainted = opaque_tainted(loss0)

    clean, excluded_opaque = [], 0
    for i, p in enumerate(params):
        if id(p) in tainted:
            excluded_opaque += p.values.size
        else:
            clean.append(i)
    pool = [(i, j) for i in clean for j in range(params[i].values.size)]
    if not pool:
        return GradCheckReport(0.0, 0, excluded_opaque, 0, None)

    take = min(num_coords, len(pool))
    picks = rng.choice(len(pool), size=take, replace=False)

    max_rel, worst, compared, crossings = 0.0, None, 0, 0
    for k in picks:
        i, j = pool[int(k)]
        flat = params[i].values.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        lp, sp = _split_output(f())
        flat[j] = orig - h
        lm, sm = _split_output(f())
        flat[j] = orig
        if sp != sig0 or sm != sig0:
            crossings += 1
            continue
        numeric = (lp.item() - lm.item()) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        compared += 1
        if rel > max_rel or worst is None:
            max_rel = rel
            label = names[i] if names else f"param{i}"
            worst = (label, j, a, numeric, rel)
    return GradCheckReport(max_rel, compared, excluded_opaque, crossings, worst)
