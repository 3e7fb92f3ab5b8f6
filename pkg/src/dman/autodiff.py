"""Dense float64 tensors with a small reverse-mode tape.

Every operation returns a :class:`Tensor`.  When any input requires a
gradient the result records its parents and a vector-Jacobian closure;
:func:`backward` replays those closures in reverse creation order, which is
a valid reverse topological order because a node is always created after
its parents.

Arrays may carry leading batch axes; matrix operations act on the last two
axes and broadcast like :func:`numpy.matmul`.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
# dtype of values produced by operations; parameters always stay float64
_working_dtype = [np.float64]


@contextmanager
def extended_precision():
    """Run new operations in ``np.longdouble`` (used by finite-difference checks).

    On platforms where ``longdouble`` is plain double this changes nothing.
    """
    _working_dtype.append(np.longdouble)
    try:
        yield
    finally:
        _working_dtype.pop()


def has_extended_precision() -> bool:
    return np.finfo(np.longdouble).eps < np.finfo(np.float64).eps


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A softmax row has no visible entry."""


class EvaluationError(ArithmeticError):
    """A checked function produced a non-finite value."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "id", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=_working_dtype[-1])
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None) -> Tensor:
    t = Tensor(0.0, requires_grad=True, name=name)
    t.value = np.array(value, dtype=np.float64)
    return t


def constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, backward_fn)
    return Tensor(value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    # tanh form is stable for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = _lift(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _lift(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


# -- shape ------------------------------------------------------------------

def _reduced_product(x, y, out_shape):
    """``swap(x) @ y`` summed over the batch axes that ``out_shape`` broadcasts.

    The summed axes are folded into the contraction dimension so the whole
    reduction is one batched BLAS call.
    """
    batch = np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
    nb = len(batch)
    out_b = (1,) * (nb - (len(out_shape) - 2)) + tuple(out_shape[:-2])
    red = [i for i in range(nb) if out_b[i] == 1 and batch[i] != 1]
    kept = [i for i in range(nb) if i not in red]
    perm = kept + red + [nb, nb + 1]

    def fold(z):
        z = z.reshape((1,) * (nb - (z.ndim - 2)) + z.shape)
        full = tuple(batch[i] if i in red else z.shape[i] for i in range(nb)) + z.shape[-2:]
        z = np.broadcast_to(z, full).transpose(perm)
        return z.reshape(tuple(full[i] for i in kept) + (-1, z.shape[-1]))

    return (np.swapaxes(fold(x), -1, -2) @ fold(y)).reshape(out_shape)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    if bv.ndim == 2 and av.ndim > 2:
        # (..., M, K) @ (K, N) as one flat product
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bv.T).reshape(av.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), back)

    out = av @ bv

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if g.shape[:-2] == av.shape[:-2]:
                ga = g @ np.swapaxes(bv, -1, -2)
            else:
                ga = _reduced_product(np.swapaxes(g, -1, -2), np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if g.shape[:-2] == bv.shape[:-2]:
                gb = np.swapaxes(av, -1, -2) @ g
            else:
                gb = _reduced_product(av, g, bv.shape)
        return ga, gb

    return _make(out, (a, b), back)


def transpose(x) -> Tensor:
    x = _lift(x)
    return _make(np.swapaxes(x.value, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis=0) -> Tensor:
    xs = [_lift(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat shape mismatch along axis {axis}: {[x.shape for x in xs]}") from exc
    splits = np.cumsum(sizes)[:-1]
    return _make(value, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def concat_rows(a, b) -> Tensor:
    """Stack ``a`` on top of ``b`` along the row axis."""
    return concat([a, b], axis=-2)


def getitem(x, key) -> Tensor:
    x = _lift(x)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(x.value[key], (x,), back)


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    return _make(np.broadcast_to(x.value, shape), (x,), lambda g: (_unbroadcast(g, old),))


def embed(table, ids) -> Tensor:
    """Gather rows of ``table``; id 0 is padding and yields a zero row."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    keep = ids != 0
    rows = table.value[ids] * keep[..., None]
    n, d = table.shape

    def back(g):
        flat = ids[keep]
        rows_g = g[keep]
        order = np.argsort(flat, kind="stable")
        sorted_ids = flat[order]
        uniq, starts = np.unique(sorted_ids, return_index=True)
        out = np.zeros((n, d))
        if uniq.size:
            out[uniq] = np.add.reduceat(rows_g[order], starts, axis=0)
        return (out,)

    return _make(rows, (table,), back)


# -- reductions -------------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _lift(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), back)


def frobenius_norm(x) -> Tensor:
    x = _lift(x)
    xv = x.value
    n = float(np.sqrt(np.sum(xv * xv)))
    # subgradient 0 at the origin
    return _make(np.array(n), (x,), lambda g: (g * xv / n if n > 0 else np.zeros_like(xv),))


def squared_frobenius(x) -> Tensor:
    x = _lift(x)
    xv = x.value
    return _make(np.array(np.sum(xv * xv)), (x,), lambda g: (2.0 * g * xv,))


def logsumexp(x, axis=-1) -> Tensor:
    x = _lift(x)
    xv = x.value
    mx = xv.max(axis=axis, keepdims=True)
    e = np.exp(xv - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    p = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * p,))


# -- nonlinear blocks with analytic backward ------------------------------------

def softmax_rows(logits, mask=None, axis=-1) -> Tensor:
    """Numerically stabilised softmax.

    ``mask`` is a boolean array broadcastable to the logits (True = visible);
    masked entries come out exactly 0.  Every row needs a visible entry.
    """
    logits = _lift(logits)
    z = logits.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape[-mask.ndim:]:
            raise DimensionError(f"mask shape {mask.shape} does not match logits {z.shape}")
        if not mask.any(axis=axis).all():
            raise DegenerateMaskError("softmax row with every entry masked")
    # one working buffer: these arrays are (users, T, keys) and dominate inference time
    if mask is not None:
        y = np.where(mask, z, -np.inf)
        y -= y.max(axis=axis, keepdims=True)
    else:
        y = np.subtract(z, z.max(axis=axis, keepdims=True))
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (logits,), back)


SQUASH_EPS = 1e-9


def squash(s, eps=SQUASH_EPS) -> Tensor:
    """``|s|^2 / (1 + |s|^2) * s / (|s| + eps)`` over the last axis."""
    s = _lift(s)
    sv = s.value
    n2 = np.sum(sv * sv, axis=-1, keepdims=True)
    n = np.sqrt(n2)
    denom = (1.0 + n2) * (n + eps)
    gain = n2 / denom
    # d gain / dn divided by n; finite at n = 0 thanks to eps
    dgain_over_n = (2.0 - 2.0 * n2 / (1.0 + n2) - n / (n + eps)) / denom

    def back(g):
        return (gain * g + dgain_over_n * np.sum(sv * g, axis=-1, keepdims=True) * sv,)

    return _make(gain * sv, (s,), back)


def stop_gradient(x) -> Tensor:
    """Same value, cut from the tape."""
    return Tensor(_lift(x).value)


# -- tape replay ------------------------------------------------------------

def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(node) into ``node.grad`` for every ancestor that requires it."""
    if not root.requires_grad:
        return
    if grad is None:
        if root.value.size != 1:
            raise DimensionError(f"backward from non-scalar of shape {root.shape} needs a seed")
        grad = np.ones_like(root.value)
    nodes = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in nodes:
            continue
        nodes[node.id] = node
        stack.extend(p for p in node.parents if p.requires_grad)
    pending = {root.id: np.asarray(grad, dtype=np.float64)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = pending.pop(nid, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.id)
            pending[parent.id] = pg if prev is None else prev + pg


# -- gradient checking ------------------------------------------------------

def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps=1e-5, analytic=None,
               extended=False):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` is re-evaluated after in-place perturbation of each parameter entry.
    ``analytic`` optionally overrides the tape gradients (keyed by position in
    ``params``), which lets a test plant a corrupted gradient.  Returns a dict
    mapping parameter name (or index) to its max relative error.

    In double precision the difference quotient carries round-off of roughly
    ``ulp(f) / eps``, about 1e-10 for a loss near 10 at ``eps = 1e-5``, so
    entries with true gradients below ~1e-6 cannot meet a 1e-4 relative
    bound.  ``extended=True`` evaluates the perturbed objectives in
    ``np.longdouble`` (same ``eps``, same formula, divided by the exactly
    representable step) which lowers that floor by about 2000x on x86.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.value)):
        raise EvaluationError(f"non-finite objective {out.value}")
    backward(out)
    report = {}
    for k, p in enumerate(params):
        tape = analytic[k] if analytic is not None else p.grad
        if tape is None:
            tape = np.zeros_like(p.value)
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = flat[i]
            hi = _evaluate(f, extended)
            flat[i] = orig - eps
            down = flat[i]
            lo = _evaluate(f, extended)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError(f"non-finite objective while perturbing {p.name or k}")
            if extended:
                numeric.reshape(-1)[i] = (hi - lo) / (np.longdouble(up) - np.longdouble(down))
            else:
                numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
        err = relative_error(tape, numeric)
        report[p.name if p.name is not None else k] = float(err.max()) if err.size else 0.0
    return report


def _evaluate(f, extended):
    if not extended:
        return float(f().value)
    with extended_precision():
        return np.longdouble(f().value)


# -- randomness -------------------------------------------------------------

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator keyed by ``(seed, stream)``; independent of call order elsewhere."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,))))
