"""Reverse-mode automatic differentiation on dense numpy tensors.

A computation graph (tape) is recorded dynamically as ops execute. `backward`
walks the graph once in reverse topological order, accumulates gradients into
leaf tensors, and frees the graph as it goes. Shapes are the 1-D vectors and
2-D row matrices the recurrent pipeline needs, plus trailing-dim broadcasting
for bias adds; nothing more general.

All data is float64. Softmax and the fused BCE/NLL ops use max-subtraction /
log-sum-exp so losses are computed from logits, never from saturated
probabilities.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracle paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` (parameters, probed inputs)
    collect gradients in ``.grad``; derived nodes carry their provenance in
    ``_parents``/``_vjp`` until ``backward`` consumes them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = None
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operators; non-Tensor operands are treated as constants
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._parents is not None


def node(data, parents, vjp) -> Tensor:
    """Create a graph node; `vjp(g)` returns one gradient per parent.

    The hook for fused module-level primitives (attention scores, losses).
    Recording is skipped when grads are disabled or no parent is tracked.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(_tracked(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable grad-requiring leaf.

    The loss must be scalar. The recorded graph is consumed: node provenance
    is cleared as gradients propagate, so a second backward through the same
    graph is impossible and memory is released promptly. Leaf grads add to
    any gradient already present; callers reset grads between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._parents is None and not loss.requires_grad:
        return

    # iterative post-order topological sort (graphs outgrow the recursion limit)
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._parents is not None:
            for p in t._parents:
                if id(p) not in visited and _tracked(p):
                    stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t._parents is not None:
            parent_grads = t._vjp(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not _tracked(p):
                    continue
                acc = grads.get(id(p))
                if acc is None:
                    grads[id(p)] = np.asarray(pg, dtype=DTYPE)
                else:
                    acc += pg
            t._parents = None
            t._vjp = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy trailing-dim broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _const(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        out = node(a.data + b.data, (a, b), None)
        if out._parents is not None:
            ash, bsh = a.shape, b.shape
            out._vjp = lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh))
        return out
    c = _const(b)
    out = node(a.data + c, (a,), None)
    if out._parents is not None:
        ash = a.shape
        out._vjp = lambda g: (_unbroadcast(g, ash),)
    return out


def sub(a, b) -> Tensor:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        out = node(a.data - b.data, (a, b), None)
        if out._parents is not None:
            ash, bsh = a.shape, b.shape
            out._vjp = lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh))
        return out
    if isinstance(a, Tensor):
        return add(a, -_const(b))
    return add(neg(b), _const(a))


def neg(a: Tensor) -> Tensor:
    return node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if isinstance(b, Tensor):
        ad, bd = a.data, b.data
        out = node(ad * bd, (a, b), None)
        if out._parents is not None:
            ash, bsh = a.shape, b.shape
            out._vjp = lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))
        return out
    c = _const(b)
    ad = a.data
    out = node(ad * c, (a,), None)
    if out._parents is not None:
        ash = a.shape
        out._vjp = lambda g: (_unbroadcast(g * c, ash),)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the 1-D/2-D combinations numpy's ``@`` accepts."""
    ad, bd = a.data, b.data
    out_data = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad  # 1-D dot

    return node(out_data, (a, b), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ash = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ash).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ash).copy(),)

    return node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return node(np.concatenate(datas, axis=axis), tuple(tensors), vjp)


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return node(np.stack([t.data for t in tensors], axis=0), tuple(tensors), vjp)


def narrow(a: Tensor, start: int, size: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    ash = a.shape

    def vjp(g):
        out = np.zeros(ash, dtype=DTYPE)
        out[idx] = g
        return (out,)

    return node(a.data[idx], (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    ash = a.shape
    return node(a.data.reshape(shape), (a,), lambda g: (g.reshape(ash),))


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a (1, d) row n times; gradient sums back over rows."""
    if a.ndim != 2 or a.shape[0] != 1:
        raise ValueError(f"tile_rows expects shape (1, d), got {a.shape}")
    return node(
        np.repeat(a.data, n, axis=0), (a,), lambda g: (g.sum(axis=0, keepdims=True),)
    )


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)
    return node(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return node(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return node(out_data, (a,), lambda g: (g * out_data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return node(p, (a,), vjp)


def embed(table: Tensor, ids) -> Tensor:
    """Select rows `ids` of an embedding table; gradient scatter-adds back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embed expects a 1-D id array")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    tsh = table.shape

    def vjp(g):
        out = np.zeros(tsh, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return node(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------------------
# fused losses (computed from logits for stability)


def log_prob_from_logits(logits: Tensor, ids) -> Tensor:
    """Per-row log softmax probability of the chosen id: (B, V) -> (B,)."""
    ids = np.asarray(ids, dtype=np.int64)
    x = logits.data
    if x.ndim != 2 or ids.shape != (x.shape[0],):
        raise ValueError(f"expected (B, V) logits with B ids, got {x.shape} / {ids.shape}")
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.arange(x.shape[0])
    out_data = x[rows, ids] - lse

    def vjp(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        d = -p * g[:, None]
        d[rows, ids] += g
        return (d,)

    return node(out_data, (logits,), vjp)


def bce_with_logits(logits: Tensor, targets, pos_weight=None, mask=None) -> Tensor:
    """Summed binary cross entropy against (possibly soft) targets.

    ``pos_weight`` scales the positive-class term; ``mask`` zeroes entries
    out of both the loss and its gradient. Both broadcast against logits.
    """
    x = logits.data
    y = _const(targets)
    w = np.ones((), dtype=DTYPE) if pos_weight is None else _const(pos_weight)
    m = np.ones((), dtype=DTYPE) if mask is None else _const(mask)
    softplus_neg = np.logaddexp(0.0, -x)  # -log sigmoid(x)
    softplus_pos = np.logaddexp(0.0, x)  # -log(1 - sigmoid(x))
    elem = (w * y * softplus_neg + (1.0 - y) * softplus_pos) * m

    def vjp(g):
        s = _sigmoid_np(x)
        return (g * m * (w * y * (s - 1.0) + (1.0 - y) * s),)

    return node(elem.sum(), (logits,), vjp)


# ---------------------------------------------------------------------------
# convenience


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map with weights stored (in_dim, out_dim)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one category per row of a (B, V) probability matrix."""
    cum = np.cumsum(probs, axis=-1)
    u = rng.random((probs.shape[0], 1)) * cum[:, -1:]
    return np.minimum((u > cum).sum(axis=-1), probs.shape[-1] - 1)
