"""Dense value grids with tape-based reverse-mode differentiation.

Every primitive returns a new :class:`ValueGrid`. When gradient recording is
enabled and at least one input requires a gradient, the primitive appends a
node to the active :class:`ComputationTape`; :func:`backward` replays that
tape in reverse.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_FILL = -1e9

_DEFAULT_DTYPE: type = np.float32
_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised whenever a forward or backward pass produces NaN or Inf."""


class GradCheckError(RuntimeError):
    pass


def default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created grids."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ValueGrid:
    """An N-dimensional real array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, ValueGrid):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"ValueGrid(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __truediv__(self, other):
        if isinstance(other, ValueGrid):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[ValueGrid, ...]
    output: ValueGrid
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationTape:
    """Nodes in creation order, which is always a topological order."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = ComputationTape()


def active_tape() -> ComputationTape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.reset()


def as_grid(x) -> ValueGrid:
    if isinstance(x, ValueGrid):
        return x
    return ValueGrid(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


def make_op(op: str, data: np.ndarray, inputs: Sequence[ValueGrid], backward_fn) -> ValueGrid:
    """Wrap ``data`` as the output of primitive ``op`` and tape it if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    Custom primitives elsewhere in the package are built on this.
    """
    _check_finite(data, op)
    out = ValueGrid(data)
    if _GRAD_ENABLED and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._is_leaf = False
        _TAPE.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: ValueGrid) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires a gradient."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        reset_tape()
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.data.dtype)
            if gi.shape != inp.shape:
                gi = _unbroadcast(gi, inp.shape).reshape(inp.shape)
            _check_finite(gi, f"backward of {node.op}")
            if inp.grad is None:
                # gradients are never mutated in place, so aliasing is safe
                inp.grad = gi
            else:
                inp.grad = inp.grad + gi
        if not node.output._is_leaf:
            node.output.grad = None
    reset_tape()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> ValueGrid:
    a, b = as_grid(a), as_grid(b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> ValueGrid:
    a, b = as_grid(a), as_grid(b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> ValueGrid:
    a, b = as_grid(a), as_grid(b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return make_op("mul", ad * bd, (a, b), grad_fn)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    s = np.tanh(x * 0.5)
    s += 1.0
    s *= 0.5
    return s


def sigmoid(x: ValueGrid) -> ValueGrid:
    s = _sigmoid_np(x.data)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: ValueGrid) -> ValueGrid:
    xd = x.data
    s = _sigmoid_np(xd)
    return make_op("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def exp(x: ValueGrid) -> ValueGrid:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return make_op("exp", e, (x,), lambda g: (g * e,))


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: ValueGrid, b: ValueGrid) -> ValueGrid:
    a, b = as_grid(a), as_grid(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes so a single GEMM handles the whole batch
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])

        def grad_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_op("matmul", (a2 @ bd).reshape(lead + (bd.shape[-1],)), (a, b), grad_fn)

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op("matmul", ad @ bd, (a, b), grad_fn)


def reshape(x: ValueGrid, shape) -> ValueGrid:
    src = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: ValueGrid, axes=None) -> ValueGrid:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: ValueGrid) -> ValueGrid:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[ValueGrid], axis: int = 0) -> ValueGrid:
    xs = [as_grid(x) for x in xs]
    axis = axis % xs[0].ndim
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_op(
        "concat",
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def take(x: ValueGrid, indices, axis: int = 0) -> ValueGrid:
    """Gather along ``axis`` (embedding lookup is ``take(table, ids)``)."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    src_shape = x.shape

    def grad_fn(g):
        n = src_shape[axis]
        g_moved = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        rest = g_moved.shape[idx.ndim :]
        width = int(np.prod(rest))
        flat_idx = (idx.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
        summed = np.bincount(flat_idx, weights=g_moved.reshape(-1), minlength=n * width)
        moved = summed.reshape((n,) + rest).astype(g.dtype, copy=False)
        return (np.moveaxis(moved, 0, axis),)

    return make_op("take", np.take(x.data, idx, axis=axis), (x,), grad_fn)


def scatter_rows(x: ValueGrid, rows, n_rows: int) -> ValueGrid:
    """Place row k of ``x`` at output row ``rows[k]``; other rows are zero."""
    rows = np.asarray(rows, dtype=np.intp)
    if len(np.unique(rows)) != len(rows):
        raise ValueError("scatter_rows requires distinct target rows")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    out[rows] = x.data
    return make_op("scatter_rows", out, (x,), lambda g: (g[rows],))


def reduce_sum(x: ValueGrid, axis=None, keepdims: bool = False) -> ValueGrid:
    src = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return make_op("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn)


def reduce_mean(x: ValueGrid, axis=None, keepdims: bool = False) -> ValueGrid:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# normalisation, softmax, loss


def rms_norm(x: ValueGrid, gain: ValueGrid, eps: float = 1e-6) -> ValueGrid:
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def grad_fn(g):
        gxhat = g * gd
        gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gg

    return make_op("rms_norm", xhat * gd, (x, gain), grad_fn)


def softmax_rows(x: ValueGrid, mask=None) -> ValueGrid:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks admissible entries.

    Inadmissible entries receive a large negative fill before normalisation
    and are forced to exactly zero afterwards.
    """
    xd = x.data
    _check_finite(xd, "softmax_rows input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("empty attention row")
        keep = mask.astype(xd.dtype)
        e = xd + (1.0 - keep) * np.asarray(MASK_FILL, dtype=xd.dtype)
    else:
        e = xd.copy()
    e -= e.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    if mask is not None:
        e *= keep
    e /= e.sum(axis=-1, keepdims=True)
    p = e

    def grad_fn(g):
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        return (gp,)

    return make_op("softmax_rows", p, (x,), grad_fn)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_mean(logits: ValueGrid, targets, weights=None) -> ValueGrid:
    """Mean over included rows of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise ValueError("cross_entropy_mean expects logits of shape [n, V]")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    w = np.ones(n, dtype=bool) if weights is None else np.asarray(weights).astype(bool)
    count = int(w.sum())
    if count == 0:
        raise ValueError("cross_entropy_mean: no included instances")
    chosen = targets[w]
    if chosen.min() < 0 or chosen.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    logp = log_softmax_np(logits.data)
    safe_t = np.where(w, targets, 0)
    nll = -logp[np.arange(n), safe_t]
    loss = np.asarray(np.sum(nll[w]) / count, dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), safe_t] -= 1.0
        p *= (w / count)[:, None]
        return (p * g,)

    return make_op("cross_entropy_mean", loss, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    worst: tuple[str, tuple[int, ...]] | None
    n_coords: int

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[], ValueGrid],
    params: dict[str, ValueGrid],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of ``f`` against central differences.

    ``max_coords`` caps the coordinates checked per parameter (sampled with
    ``seed``); None checks every coordinate.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise GradCheckError(f"grad_check requires 64-bit parameters, {name} is {p.dtype}")
    with no_grad():
        first = f().item()
        second = f().item()
    if first != second:
        raise GradCheckError(f"non-deterministic function: {first!r} != {second!r}")

    for p in params.values():
        p.zero_grad()
    reset_tape()
    backward(f())
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    worst, worst_err, n_coords = None, -1.0, 0
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        errs = np.empty(len(coords))
        with no_grad():
            for k, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp = f().item()
                flat[c] = orig - h
                fm = f().item()
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * h)
                errs[k] = relative_error(analytic.reshape(-1)[c], numeric)
        n_coords += len(coords)
        per_param[name] = float(errs.max()) if len(errs) else 0.0
        if len(errs) and errs.max() > worst_err:
            worst_err = float(errs.max())
            worst = (name, np.unravel_index(int(coords[errs.argmax()]), p.shape))
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(per_param, worst, n_coords)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
