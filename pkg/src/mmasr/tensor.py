"""Dense float64 tensors with a reverse-mode tape.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient (and recording is enabled) the result keeps a reference to its
parents plus a closure mapping the upstream gradient to one gradient per
parent. :func:`backward` walks that graph in reverse topological order.

Shapes are limited to rank 3 (batch x time x feature).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-10
MAX_RANK = 3

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a function under gradient check is not deterministic."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense real array, optionally a node in the autodiff graph.

    Args:
        data: anything ``np.asarray`` accepts; stored as float64.
        requires_grad: mark as a leaf whose gradient should be tracked.
        name: optional label, used in diagnostics.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward value as a graph node.

    ``backward_fn(g)`` receives the upstream gradient (same shape as
    ``value``) and returns one gradient (or ``None``) per parent.
    """
    # a finite sum implies finite entries; the full scan runs only on failure
    if not math.isfinite(value.sum()) and not np.isfinite(value).all():
        raise FloatingPointError(f"{op}: non-finite values in result")
    out = Tensor(value)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        _binary(np.add, a, b, "add"),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        _binary(np.subtract, a, b, "sub"),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        _binary(np.multiply, a, b, "mul"),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tanh_elem(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return apply_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


tanh = tanh_elem


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return apply_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return apply_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    """Natural log, floored at ``LOG_FLOOR``; gradient is zero below the floor."""
    clipped = np.maximum(x.data, LOG_FLOOR)
    live = x.data > LOG_FLOOR
    return apply_op(np.log(clipped), (x,), lambda g: (np.where(live, g / clipped, 0.0),), "log")


def square(x: Tensor) -> Tensor:
    return apply_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return apply_op(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return apply_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


class _IndexedGrad:
    """Gradient that is zero outside ``x[idx]``; accumulated in place."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx, self.g = idx, g


def slice_(x: Tensor, idx) -> Tensor:
    def bw(g):
        return (_IndexedGrad(idx, g),)

    return apply_op(x.data[idx], (x,), bw, "slice")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref) if ref else 0
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in xs]}"
            )
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return apply_op(
        np.concatenate([x.data for x in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
        "concat",
    )


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of :func:`concat`: cut ``x`` into consecutive pieces."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not sum to axis length {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n)
        out.append(slice_(x, tuple(idx)))
        start += n
    return out


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {[x.shape for x in xs]}")
    return apply_op(
        np.stack([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
        "stack",
    )


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the boolean ``mask`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    return apply_op(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(m, g, 0.0), a.shape), _unbroadcast(np.where(m, 0.0, g), b.shape)),
        "where",
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry a leading batch axis (rank 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return apply_op(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def bw(g):
        gx = g @ w.data
        g2 = g.reshape(-1, w.shape[0])
        gw = g2.T @ x.data.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return apply_op(y, parents, bw, "linear")


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Batched convex combination: (B,N) x (B,N,D) -> (B,D)."""
    if weights.ndim != 2 or values.ndim != 3 or weights.shape != values.shape[:2]:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    y = np.einsum("bn,bnd->bd", weights.data, values.data)

    def bw(g):
        gw = np.einsum("bd,bnd->bn", g, values.data)
        gv = weights.data[:, :, None] * g[:, None, :]
        return gw, gv

    return apply_op(y, (weights, values), bw, "weighted_sum")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range for table with {n} rows: {ids.tolist()}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return apply_op(table.data[ids], (table,), bw, "take_rows")


# ---------------------------------------------------------------------------
# probability


def _softmax_np(d: np.ndarray, axis: int) -> np.ndarray:
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor")
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return apply_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0 or x.shape[axis] == 0:
        raise ValueError("log_softmax of an empty tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return apply_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of token negative log-likelihoods.

    Args:
        logits: (B, V) unnormalised scores.
        targets: (B,) integer class ids.
        weights: optional (B,) per-row weights (0 for padding).

    Returns:
        scalar Tensor (shape ``()``).
    """
    targets = np.asarray(targets, dtype=np.int64)
    B = logits.shape[0]
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(B), targets]
    p = np.exp(z - lse[:, None])

    def bw(g):
        d = p.copy()
        d[np.arange(B), targets] -= 1.0
        return (d * (w * g)[:, None],)

    return apply_op(np.asarray((w * nll).sum()), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation from a scalar ``loss``.

    Leaf gradients are written to ``.grad`` (overwriting, not accumulating
    across calls). The graph is released afterwards.

    Args:
        loss: scalar-shaped tensor.
        params: if given, the returned table holds exactly these tensors,
            with a zero gradient for any not reached from ``loss``.

    Returns:
        mapping from leaf tensor to its gradient array.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    table: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # buffers safe to update in place
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            if node._backward is None:
                table[node] = g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if isinstance(pg, _IndexedGrad):
                    if key not in owned:
                        buf = np.zeros_like(p.data)
                        if key in grads:
                            buf += grads[key]
                        grads[key] = buf
                        owned.add(key)
                    grads[key][pg.idx] += pg.g
                elif key not in grads:
                    grads[key] = pg
                elif key in owned:
                    grads[key] += pg
                else:
                    grads[key] = grads[key] + pg
                    owned.add(key)
            node._parents = ()
            node._backward = None
    if params is None:
        return table
    out = {}
    for p in params:
        g = table.get(p)
        if g is None:
            g = np.zeros_like(p.data)
            p.grad = g
        out[p] = g
    return out


def grad_check(scalar_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between autodiff and central-difference gradients.

    ``scalar_fn`` must rebuild its graph from ``params`` on every call and be
    deterministic. Relative error is ``|a-b| / max(|a|, |b|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    params = list(params)
    with no_grad():
        f0 = scalar_fn().data.copy()
        f1 = scalar_fn().data.copy()
    if not np.array_equal(f0, f1):
        raise GradCheckError("function is not deterministic: repeated evaluation differs")
    analytic = backward(scalar_fn(), params)

    worst = 0.0
    with no_grad():
        for p in params:
            a = analytic[p].reshape(-1)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(scalar_fn().data)
                flat[i] = orig - eps
                fm = float(scalar_fn().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
