"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive records its parents and a backward rule mapping the output
gradient to one gradient per parent.  ``backward`` linearizes the graph into a
``Tape`` (inputs before outputs) and sweeps it once in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

LOG_EPS = 1e-30


class TensorError(Exception):
    pass


class ShapeMismatch(TensorError, ValueError):
    pass


class ZeroNormRow(TensorError, ValueError):
    pass


class NonScalarLoss(TensorError, ValueError):
    pass


class NonFiniteEvaluation(TensorError, ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op) -> Tensor:
    # Constant subgraphs never reach the tape.
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log with inputs clamped at 1e-30."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_EPS)
    live = a.data >= LOG_EPS
    return _node(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------------------
# shape and indexing


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), backward, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        if _scatter_is_injective(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward, "take")


def _scatter_is_injective(index) -> bool:
    """True when ``index`` never selects the same element twice."""
    parts = index if isinstance(index, tuple) else (index,)
    if all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis for p in parts):
        return all(not isinstance(p, slice) or (p.step or 1) > 0 for p in parts)
    if len(parts) == 1 and isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu":
        return len(np.unique(index)) == len(index)
    return False


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


def std(a, axis=0, eps: float = 1e-8) -> Tensor:
    """Population standard deviation, ``sqrt(var + eps)``."""
    centered = a - reduce_mean(a, axis=axis, keepdims=True)
    return sqrt(reduce_mean(centered * centered, axis=axis) + eps)


def trace(a) -> Tensor:
    n = min(a.shape)
    idx = np.arange(n)
    return reduce_sum(take(a, (idx, idx)))


def frobenius(a) -> Tensor:
    return sqrt(reduce_sum(a * a))


def segment_sum(a, ids: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``ids``."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:1]:
        raise ShapeMismatch(f"ids {ids.shape} vs rows {a.shape[:1]}")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, ids, a.data)
    return _node(out, (a,), lambda g: (g[ids],), "segment_sum")


# ---------------------------------------------------------------------------
# normalization and softmax


def normalize_rows(a) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ZeroNormRow("cannot normalize an all-zero row")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _node(out, (a,), backward, "normalize_rows")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def masked_logsumexp(a, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp of a 2-d tensor over entries where ``mask`` holds.

    Every row must have at least one selected entry.
    """
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape or a.ndim != 2:
        raise ShapeMismatch(f"mask {mask.shape} vs input {a.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("masked_logsumexp: empty row")
    m = np.max(a.data, axis=1, keepdims=True, where=mask, initial=-np.inf)
    e = np.exp(a.data - m, where=mask, out=np.zeros(a.shape))
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    weights = e / s
    return _node(out, (a,), lambda g: (g[:, None] * weights,), "masked_logsumexp")


# ---------------------------------------------------------------------------
# convolution


_GATHER_CACHE: dict = {}


def _reflect_index(n: int) -> np.ndarray:
    idx = np.arange(-1, n + 1)
    idx[0], idx[-1] = 1, n - 2
    return idx


def _conv_gather(height: int, width: int):
    """Flat source index for each (pixel, 3x3 tap) under reflect padding."""
    key = (height, width)
    if key not in _GATHER_CACHE:
        rows, cols = _reflect_index(height), _reflect_index(width)
        r = np.arange(height)[:, None, None, None]
        c = np.arange(width)[None, :, None, None]
        dy = np.arange(3)[None, None, :, None]
        dx = np.arange(3)[None, None, None, :]
        src = rows[r + dy] * width + cols[c + dx]
        gidx = src.reshape(height * width, 9)
        n = height * width
        scatter = sparse.csr_matrix(
            (np.ones(n * 9), (gidx.ravel(), np.arange(n * 9))), shape=(n, n * 9))
        _GATHER_CACHE[key] = (gidx, scatter)
    return _GATHER_CACHE[key]


def conv2d(x, weight, bias) -> Tensor:
    """3x3 stride-1 convolution with reflect padding.

    ``x`` is (N, H, W, C_in), ``weight`` is (3, 3, C_in, C_out), ``bias`` is
    (C_out,).  Implemented as a gather followed by one matrix product.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[3]) or bias.shape != weight.shape[3:]:
        raise ShapeMismatch(f"conv2d x={x.shape} w={weight.shape} b={bias.shape}")
    n, h, w, cin = x.shape
    if h < 2 or w < 2:
        raise ShapeMismatch("conv2d needs at least 2x2 input")
    cout = weight.shape[3]
    gidx, scatter = _conv_gather(h, w)
    xd = x.data.reshape(n, h * w, cin)
    cols = xd[:, gidx, :].reshape(n * h * w, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = (cols @ wmat + bias.data).reshape(n, h, w, cout)

    def backward(g):
        g2 = g.reshape(n * h * w, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(n, h * w * 9, cin)
        gx = np.stack([scatter @ gcols[i] for i in range(n)]).reshape(n, h, w, cin)
        return gx, gw, gb

    return _node(out, (x, weight, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# composite layers


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))


def batch_norm_rows(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each column over the row axis using the current batch statistics."""
    mu = reduce_mean(x, axis=0, keepdims=True)
    centered = x - mu
    var = reduce_mean(centered * centered, axis=0, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention for 2-d query/key/value blocks."""
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"attention q={q.shape} k={k.shape} v={v.shape}")
    scores = (q @ transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1) @ v


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the nodes a scalar depends on."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self):
        return len(self.nodes)

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.parents]


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None, tape: Tape | None = None):
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf reached.  Returns a dict leaf -> gradient, or
    a list aligned with ``wrt`` (zeros for tensors the loss does not touch).
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    tape = tape or Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    result = {}
    for leaf in tape.leaves:
        leaf.grad = grads.get(id(leaf), np.zeros_like(leaf.data))
        result[leaf] = leaf.grad
    if wrt is None:
        return result
    return [result.get(t, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list = field(default_factory=list)

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} max_abs={self.max_abs_error:.3e} max_rel={self.max_rel_error:.3e} "
                f"checked={self.n_checked} excluded={len(self.excluded)}")


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5, tolerance: float = 1e-4,
               indices=None) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``fn`` against central differences.

    Coordinates where one-sided differences disagree at both ``step`` and
    ``step / 2`` are treated as kinks and listed in ``excluded``.  Relative
    error is used where the analytic gradient exceeds 1e-8 in magnitude,
    absolute error elsewhere.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    out = fn(x)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteEvaluation("function is not finite at the point")
    (analytic,) = backward(out, wrt=[x])

    def f(p):
        val = fn(Tensor(p)).data
        if not np.all(np.isfinite(val)):
            raise NonFiniteEvaluation("function is not finite near the point")
        return float(val.reshape(()))

    flat = point.ravel()
    coords = range(flat.size) if indices is None else indices
    f0 = float(out.data.reshape(()))
    max_abs = max_rel = 0.0
    excluded = []
    n_checked = 0
    for i in coords:
        i = int(i)

        def at(delta):
            p = flat.copy()
            p[i] += delta
            return f(p.reshape(point.shape))

        fp, fm = at(step), at(-step)
        numeric = (fp - fm) / (2 * step)
        bend = abs(fp - 2 * f0 + fm) / step
        if bend > 1e-6 * (1.0 + abs(numeric)):
            half = abs(at(step / 2) - 2 * f0 + at(-step / 2)) / (step / 2)
            if half > 0.75 * bend:
                excluded.append(i)
                continue
        a = float(analytic.ravel()[i])
        err = abs(a - numeric)
        max_abs = max(max_abs, err)
        if abs(a) > 1e-8:
            rel = err / max(abs(a), abs(numeric))
        else:
            rel = err
        max_rel = max(max_rel, rel)
        n_checked += 1
    return GradCheckReport(max_abs, max_rel, max_rel <= tolerance, n_checked, excluded)
