"""
Small dense-array engine with reverse-mode differentiation.

Every value is a float64 numpy array wrapped in a ``Tensor`` that remembers
which op produced it and how to push gradients back to its parents. Ops accept
arbitrary leading batch axes; the documented 2-D shapes are the last two axes.
"""

import contextlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyLossError, VocabularyError

# per thread, so a sweep worker evaluating cannot switch off another's graph
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "grad", "op", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def item(self):
        return float(self.value)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, op, backward_fn):
    out = Tensor(value)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _topo_order(root):
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


def backward(root):
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    Leaf gradients accumulate across calls until ``zero_grad``; interior
    nodes are reset for each call.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.value) if root.grad is None else root.grad + 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    # [..., m, k] @ [k, n] runs as one 2-D product; numpy would loop the batch
    flat = bv.ndim == 2 and av.ndim > 2
    k, n = bv.shape[-2:]

    def bwd(g):
        if a.requires_grad:
            if flat:
                _accumulate(a, (g.reshape(-1, n) @ bv.T).reshape(av.shape))
            else:
                _accumulate(a, _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if b.requires_grad:
            if flat:
                _accumulate(b, av.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    out = (av.reshape(-1, k) @ bv).reshape(av.shape[:-1] + (n,)) if flat else av @ bv
    return _result(out, (a, b), "matmul", bwd)


def transpose(a, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.value.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        _accumulate(a, np.transpose(g, inverse))

    return _result(np.transpose(a.value, axes), (a,), "transpose", bwd)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.value.shape

    def bwd(g):
        _accumulate(a, g.reshape(src))

    return _result(a.value.reshape(shape), (a,), "reshape", bwd)


def concat_features(a, b):
    """Concatenate along the last (feature) axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[:-1] != b.value.shape[:-1]:
        raise DimensionError(f"concat row mismatch: {a.shape} vs {b.shape}")
    p = a.value.shape[-1]

    def bwd(g):
        _accumulate(a, g[..., :p])
        _accumulate(b, g[..., p:])

    return _result(np.concatenate([a.value, b.value], axis=-1), (a, b), "concat", bwd)


def embedding_lookup(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids[(ids < 0) | (ids >= vocab)].flat[0])
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab}")

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.value.shape[1]))

    return _result(table.value[ids], (table,), "embedding", bwd)


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a, b, op):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    return _result(a.value + b.value, (a, b), "add", bwd)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    return _result(a.value - b.value, (a, b), "sub", bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return _result(av * bv, (a, b), "mul", bwd)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        _accumulate(a, g * c)

    return _result(a.value * c, (a,), "scale", bwd)


def dropout(a, rate, rng):
    """Inverted dropout: zero each element with probability ``rate`` and scale
    survivors by 1/(1-rate). Identity when ``rng`` is None or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    a = as_tensor(a)
    if rng is None or rate == 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)

    def bwd(g):
        _accumulate(a, g * keep)

    return _result(a.value * keep, (a,), "dropout", bwd)


def relu(a):
    a = as_tensor(a)
    on = a.value > 0

    def bwd(g):
        _accumulate(a, g * on)

    return _result(np.where(on, a.value, 0.0), (a,), "relu", bwd)


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    s = _stable_sigmoid(a.value)

    def bwd(g):
        _accumulate(a, g * s * (1.0 - s))

    return _result(s, (a,), "sigmoid", bwd)


_ELEMENTWISE = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}


def elementwise(op, *args):
    """Dispatch by name: relu, sigmoid, add, mul or scale."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def sum_all(a):
    a = as_tensor(a)
    shape = a.value.shape

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, shape))

    return _result(np.array(a.value.sum()), (a,), "sum", bwd)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax_rows(a, mask=None):
    """Softmax over the last axis.

    ``mask`` (broadcastable, True = keep) removes entries from the
    normalisation; each row must keep at least one entry.
    """
    a = as_tensor(a)
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accumulate(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (a,), "softmax", bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.value.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm over a width-{n} axis is degenerate")
    mu = a.value.mean(axis=-1, keepdims=True)
    xc = a.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def bwd(g):
        if a.requires_grad:
            dxhat = g * gv
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(a, dx)
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))

    return _result(xhat * gv + bias.value, (a, gain, bias), "layer_norm", bwd)


def cross_entropy(logits, targets, mask=None):
    """Mean of -log softmax(logits)[target] over positions where mask is set."""
    logits = as_tensor(logits)
    x = logits.value
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise DimensionError(f"{targets.shape[0]} targets for {flat.shape[0]} logit rows")
    if mask is None:
        keep = np.ones(flat.shape[0], dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape[0] != flat.shape[0]:
            raise DimensionError(f"mask of length {keep.shape[0]} for {flat.shape[0]} rows")
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross entropy over zero unmasked positions")
    if targets[keep].size and (targets[keep].min() < 0 or targets[keep].max() >= c):
        raise VocabularyError(f"target outside [0, {c})")
    safe_t = np.where(keep, targets, 0)
    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = lse - shifted[rows, safe_t]
    loss = float(nll[keep].sum() / count)

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe_t] -= 1.0
        p *= (keep / count)[:, None]
        _accumulate(logits, (g * p).reshape(x.shape))

    return _result(np.array(loss), (logits,), "cross_entropy", bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    kink_skipped: int


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self):
        return all(p.max_rel_err < self.tol for p in self.params)

    @property
    def kink_skipped(self):
        return sum(p.kink_skipped for p in self.params)

    def failures(self):
        return sorted(
            (p for p in self.params if p.max_rel_err >= self.tol),
            key=lambda p: -p.max_rel_err,
        )


# Central differences of an O(1) loss carry roundoff near eps_mach * |f| / eps,
# about 1e-11 at eps=1e-5. Gradients that are exactly zero (a key bias under
# softmax shift invariance) only ever show that noise, so the denominator is
# floored well above it: at tol=1e-4 a tiny gradient must still agree to 1e-10.
REL_ERR_FLOOR = 1e-6


def rel_err(a, n):
    return abs(a - n) / max(REL_ERR_FLOOR, abs(a) + abs(n))


def grad_check(f, params, eps=1e-5, tol=1e-4, skip=None):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors that ``f`` reads. An element is
    kink-skipped when its one-sided slopes disagree by more than
    ``max(1e-3, 0.1 * max |slope|)`` (a nondifferentiable point inside
    [p - eps, p + eps]) or when ``skip(name, index, value)`` is true.
    """
    for p in params.values():
        p.zero_grad()
    root = f()
    backward(root)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    with no_grad():
        f0 = float(f().value)

    report = GradCheckReport(tol=tol, eps=eps)
    for name, p in params.items():
        worst = ParamCheck(name, p.value.size, 0.0, (), 0.0, 0.0, 0)
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            if skip is not None and skip(name, idx, orig):
                worst.kink_skipped += 1
                continue
            with no_grad():
                p.value[idx] = orig + eps
                fp = float(f().value)
                p.value[idx] = orig - eps
                fm = float(f().value)
            p.value[idx] = orig
            num = (fp - fm) / (2 * eps)
            right, left = (fp - f0) / eps, (f0 - fm) / eps
            if abs(right - left) > max(1e-3, 0.1 * max(abs(right), abs(left))):
                worst.kink_skipped += 1
                continue
            a = float(analytic[name][idx])
            r = rel_err(a, num)
            if r >= worst.max_rel_err:
                worst.max_rel_err, worst.worst_index = r, idx
                worst.analytic, worst.numeric = a, num
        report.params.append(worst)
    return report


def global_norm(arrays):
    return math.sqrt(sum(float((g * g).sum()) for g in arrays))
