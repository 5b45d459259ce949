"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: ops executed while a Graph is active are recorded on its tape
(a list already in topological order) and replayed in reverse by backward().
Ops executed with no active graph just compute values, which is what
evaluation and finite-difference probes use.

Everything is 64-bit; the gradient checks downstream assume it.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


_ACTIVE = threading.local()


def active_graph():
    return getattr(_ACTIVE, "graph", None)


class Graph:
    """Execution tape for one episode. Confined to a single thread.

    ``nodes`` holds op outputs in execution order, so iterating it reversed
    visits every op after all of its consumers.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if active_graph() is not None:
            raise RuntimeError("a Graph is already active on this thread")
        _ACTIVE.graph = self
        return self

    def __exit__(self, *exc):
        _ACTIVE.graph = None
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_grad_shared", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._grad_shared = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values, cut out of the graph."""
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    # operator sugar; scalars are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, mul(_lift(other), Tensor(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data, name="") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    # first contribution adopts the buffer (flagged shared, never mutated);
    # a second contribution replaces it with an owned sum
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_shared = True
    elif t._grad_shared:
        t.grad = t.grad + g
        t._grad_shared = False
    else:
        t.grad += g


def _record(out: Tensor, parents, backward_fn):
    out.requires_grad = any(p.requires_grad for p in parents)
    graph = getattr(_ACTIVE, "graph", None)
    if graph is not None and out.requires_grad:
        out._parents = parents if isinstance(parents, tuple) else tuple(parents)
        out._backward = backward_fn
        graph.nodes.append(out)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into t.grad for every tensor reachable from loss.

    Reachable requires_grad tensors end up with a grad even if no adjoint
    flowed to them (zero-filled).
    """
    graph = active_graph()
    if graph is None:
        raise RuntimeError("backward: no active Graph on this thread")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")

    reachable = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in reachable:
                reachable[id(p)] = p
                stack.append(p)

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(graph.nodes):
        if id(node) in reachable and node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for t in reachable.values():
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast up from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(data)

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(data)

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n) @ (n, m) -> (..., m), or (m, n) @ (n,) -> (m,)."""
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        if ad.ndim == 0 or ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
        out = Tensor(np.matmul(ad, bd))

        def back(g):
            if a.requires_grad:
                _accum(a, np.matmul(g, bd.T))
            if not b.requires_grad:
                return
            if ad.ndim == 1:
                _accum(b, np.outer(ad, g))
            elif ad.ndim == 2:
                _accum(b, np.matmul(ad.T, g))
            else:
                n, m = bd.shape
                _accum(b, np.matmul(ad.reshape(-1, n).T, g.reshape(-1, m)))

        return _record(out, (a, b), back)
    if bd.ndim == 1 and ad.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
        out = Tensor(np.matmul(ad, bd))

        def back(g):
            _accum(a, np.outer(g, bd))
            _accum(b, np.matmul(ad.T, g))

        return _record(out, (a, b), back)
    raise ShapeError(f"matmul: unsupported operand ranks {ad.shape} @ {bd.shape}")


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))

    def back(g):
        _accum(x, g * (1.0 - out.data * out.data))

    return _record(out, (x,), back)


def _sigmoid_vals(z: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow on both tails
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_vals(x.data))

    def back(g):
        _accum(x, g * out.data * (1.0 - out.data))

    return _record(out, (x,), back)


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))

    def back(g):
        _accum(x, g * _sigmoid_vals(x.data))

    return _record(out, (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if x.data.ndim == 0 or x.data.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {x.data.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def back(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(x, s * (g - inner))

    return _record(out, (x,), back)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def back(g):
        _accum(x, g / x.data)

    return _record(out, (x,), back)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def back(g):
        _accum(x, g * out.data)

    return _record(out, (x,), back)


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.data.shape for t in tensors]} do not conform")
    out = Tensor(data)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _record(out, tuple(tensors), back)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop] on the last axis."""
    if x.data.ndim == 0 or stop > x.data.shape[-1] or start < 0:
        raise ShapeError(f"slice: [{start}:{stop}] out of bounds for shape {x.data.shape}")
    out = Tensor(x.data[..., start:stop])

    def back(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _accum(x, full)

    return _record(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def back(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), back)


def _check_row_index(idx, k, op):
    arr = np.asarray(idx)
    if arr.size and ((arr < 0).any() or (arr >= k).any()):
        raise IndexError(f"{op}: row index out of range for {k} rows")


def gather_rows(m: Tensor, idx) -> Tensor:
    """Select one row along axis -2: m (..., k, q), idx scalar or (...,) ints."""
    k = m.data.shape[-2]
    _check_row_index(idx, k, "gather-row")
    if np.isscalar(idx) or np.asarray(idx).ndim == 0:
        i = int(idx)
        out = Tensor(m.data[..., i, :])

        def back(g):
            full = np.zeros_like(m.data)
            full[..., i, :] = g
            _accum(m, full)

        return _record(out, (m,), back)

    idx = np.asarray(idx, dtype=np.intp)
    sel = idx[..., None, None]
    out = Tensor(np.take_along_axis(m.data, sel, axis=-2).squeeze(-2))

    def back(g):
        full = np.zeros_like(m.data)
        np.put_along_axis(full, sel, g[..., None, :], axis=-2)
        _accum(m, full)

    return _record(out, (m,), back)


def scatter_rows(m: Tensor, idx, v: Tensor) -> Tensor:
    """Functional row replacement: a copy of m with row idx set to v.

    Backward routes the replaced row's adjoint to v and passes every other
    row's adjoint through to m.
    """
    k = m.data.shape[-2]
    _check_row_index(idx, k, "scatter-row")
    if v.data.shape[-1] != m.data.shape[-1]:
        raise ShapeError(f"scatter-row: value width {v.data.shape} vs memory {m.data.shape}")
    data = np.array(m.data, copy=True)
    scalar = np.isscalar(idx) or np.asarray(idx).ndim == 0
    if scalar:
        i = int(idx)
        data[..., i, :] = v.data
        out = Tensor(data)

        def back(g):
            _accum(v, _unbroadcast(g[..., i, :], v.data.shape))
            gm = np.array(g, copy=True)
            gm[..., i, :] = 0.0
            _accum(m, gm)

        return _record(out, (m, v), back)

    idx = np.asarray(idx, dtype=np.intp)
    sel = idx[..., None, None]
    np.put_along_axis(data, sel, v.data[..., None, :], axis=-2)
    out = Tensor(data)

    def back(g):
        _accum(v, np.take_along_axis(g, sel, axis=-2).squeeze(-2))
        gm = np.array(g, copy=True)
        np.put_along_axis(gm, sel, 0.0, axis=-2)
        _accum(m, gm)

    return _record(out, (m, v), back)


def weighted_rows(m: Tensor, w: Tensor) -> Tensor:
    """Mixture of rows: sum_k w[..., k] * m[..., k, :]."""
    if m.data.shape[-2] != w.data.shape[-1]:
        raise ShapeError(f"weighted-rows: {m.data.shape} rows vs weights {w.data.shape}")
    out = Tensor(np.matmul(w.data[..., None, :], m.data)[..., 0, :])

    def back(g):
        if m.requires_grad:
            _accum(m, _unbroadcast(w.data[..., :, None] * g[..., None, :], m.data.shape))
        if w.requires_grad:
            _accum(w, _unbroadcast(np.matmul(m.data, g[..., :, None])[..., 0],
                                   w.data.shape))

    return _record(out, (m, w), back)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def back(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape))

    return _record(out, (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def back(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.data.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape))

    return _record(out, (x,), back)


def cross_entropy_with_softmax(logits: Tensor, target: Tensor) -> Tensor:
    """Per-row -sum(target * log_softmax(logits)); fused for stability."""
    if logits.data.shape != target.data.shape:
        raise ShapeError(
            f"cross-entropy-with-softmax: logits {logits.data.shape} vs target {target.data.shape}"
        )
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    sumexp = e.sum(axis=-1, keepdims=True)
    lse = np.log(sumexp) + zmax
    logp = z - lse
    out = Tensor(-(target.data * logp).sum(axis=-1))

    def back(g):
        ge = g[..., None]
        if logits.requires_grad:
            s = e / sumexp
            _accum(logits, ge * (s * target.data.sum(axis=-1, keepdims=True) - target.data))
        if target.requires_grad:
            _accum(target, ge * (-logp))

    return _record(out, (logits, target), back)


def bernoulli_cross_entropy_with_logits(logits: Tensor, target: Tensor) -> Tensor:
    """Per-row sum over bits of softplus(z) - y z (the stable per-bit form)."""
    if logits.data.shape != target.data.shape:
        raise ShapeError(
            f"bernoulli-cross-entropy: logits {logits.data.shape} vs target {target.data.shape}"
        )
    z = logits.data
    out = Tensor((np.logaddexp(0.0, z) - target.data * z).sum(axis=-1))

    def back(g):
        ge = g[..., None]
        if logits.requires_grad:
            _accum(logits, ge * (_sigmoid_vals(z) - target.data))
        if target.requires_grad:
            _accum(target, ge * (-z))

    return _record(out, (logits, target), back)


# spec op-kind table; extra kinds beyond the contract set are internal helpers
OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "slice": slice_cols,
    "gather-row": gather_rows,
    "scatter-row": scatter_rows,
    "sum": tsum,
    "mean": tmean,
    "cross-entropy-with-softmax": cross_entropy_with_softmax,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by op name. The table above is the supported surface."""
    if op_kind not in OPS:
        raise ValueError(f"apply: unknown op kind {op_kind!r}; known: {sorted(OPS)}")
    return OPS[op_kind](*inputs, **kwargs)
