"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every differentiable operation returns a new :class:`Tensor` wired to its
inputs through a backward closure; :func:`backward` replays the recorded ops
in reverse topological order (see :class:`Trace`). The engine is deliberately
small: dense row-major float64 only, no in-place math on values, no global
state, so independent graphs can be built and differentiated in parallel
training runs without interference.

:func:`grad_check` is the central-finite-difference harness used throughout
the test suite to validate every exported op and every training loss.
"""

from __future__ import annotations

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class DegenerateInputError(ValueError):
    """A mathematically invalid input, e.g. a zero-norm vector fed to cosine."""


class Tensor:
    """Dense float64 array plus the bookkeeping reverse mode needs.

    Non-leaf tensors keep references to their parents and a closure that routes
    an incoming gradient to them. Gradients accumulate into ``grad`` (same
    shape as ``values``); leaves keep accumulating across backward calls until
    ``zero_grads`` resets them. Values are never mutated by ops.
    """

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; float scalars are accepted where they read naturally
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def constant(values) -> Tensor:
    """A tensor that takes no gradient (labels, masks, cached distributions)."""
    return Tensor(values)


def param(values) -> Tensor:
    """A leaf tensor that accumulates gradients (model parameters, probe inputs)."""
    return Tensor(values, requires_grad=True)


def _node(values, parents, backward_fn) -> Tensor:
    # skip closure bookkeeping entirely for constant subgraphs
    if any(p.requires_grad for p in parents):
        return Tensor(values, parents=parents, backward_fn=backward_fn)
    return Tensor(values)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Trace:
    """Ordered record of the ops behind a tensor, parents before children.

    ``backward`` walks ``nodes`` in reverse, so each recorded op is visited
    exactly once, in reverse topological order. Only nodes that require
    gradients are recorded; constant subgraphs never enter the trace.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Trace":
        order, seen, stack = [], set(), [(root, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor participating in ``loss``.

    Raises ValueError if ``loss`` is not a scalar. A loss with no
    differentiable inputs (all-constant graph) is a no-op.
    """
    if loss.values.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        return
    trace = Trace.from_root(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(trace.nodes):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = constant(b)
    out_values = a.values + b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _node(out_values, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_values = a.values * b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(out_values, (a, b), backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        _accumulate(x, g * c)

    return _node(x.values * c, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy `@` semantics."""
    out_values = a.values @ b.values

    def backward_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.values.shape))

    return _node(out_values, (a, b), backward_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.values.ndim)))
    inverse = np.argsort(axes)

    def backward_fn(g):
        _accumulate(x, g.transpose(inverse))

    return _node(x.values.transpose(axes), (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    def backward_fn(g):
        _accumulate(x, g.reshape(x.values.shape))

    return _node(x.values.reshape(shape), (x,), backward_fn)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    out_values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _node(out_values, tuple(parts), backward_fn)


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.values.shape).copy())

    return _node(x.values.sum(axis=axis, keepdims=keepdims), (x,), backward_fn)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.values.size if axis is None else x.values.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    out_values = np.exp(x.values)

    def backward_fn(g):
        _accumulate(x, g * out_values)

    return _node(out_values, (x,), backward_fn)


def log(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(x, g / x.values)

    return _node(np.log(x.values), (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth everywhere, which keeps FD checks tight."""
    inner = _GELU_C * (x.values + _GELU_A * x.values**3)
    t = np.tanh(inner)
    out_values = 0.5 * x.values * (1.0 + t)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x.values**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * x.values * (1.0 - t**2) * d_inner))

    return _node(out_values, (x,), backward_fn)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a no-op when p == 0. The mask comes from the caller's rng."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    keep = (rng.random(x.values.shape) >= p) / (1.0 - p)

    def backward_fn(g):
        _accumulate(x, g * keep)

    return _node(x.values * keep, (x,), backward_fn)


# ---------------------------------------------------------------------------
# gather / select ops

def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; ids may have any shape (embedding lookup)."""
    ids = np.asarray(ids)
    out_values = table.values[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        _accumulate(table, gt)

    return _node(out_values, (table,), backward_fn)


def index_axis(x: Tensor, axis: int, index: int) -> Tensor:
    """Select one index along an axis, dropping that axis (e.g. the [CLS] slot)."""
    out_values = np.take(x.values, index, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(x.values)
        sel = [slice(None)] * x.values.ndim
        sel[axis] = index
        gx[tuple(sel)] = g
        _accumulate(x, gx)

    return _node(out_values, (x,), backward_fn)


def gather_positions(h: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick per-position vectors h[rows, cols, :] from a (B, L, D) tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_values = h.values[rows, cols, :]

    def backward_fn(g):
        gh = np.zeros_like(h.values)
        np.add.at(gh, (rows, cols), g)
        _accumulate(h, gh)

    return _node(out_values, (h,), backward_fn)


def take_pairs(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick scalar entries m[rows, cols] from a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_values = m.values[rows, cols]

    def backward_fn(g):
        gm = np.zeros_like(m.values)
        np.add.at(gm, (rows, cols), g)
        _accumulate(m, gm)

    return _node(out_values, (m,), backward_fn)


# ---------------------------------------------------------------------------
# normalization / similarity / classification ops

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out_values = xhat * gamma.values + beta.values

    def backward_fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.values.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.values.shape))
        if x.requires_grad:
            gx_hat = g * gamma.values
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx_hat - m1 - xhat * m2))

    return _node(out_values, (x, gamma, beta), backward_fn)


def softmax(z: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature-scaled softmax with max-subtraction for overflow safety."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    scaled = z.values / temperature
    scaled = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(scaled)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(z, p * (g - dot) / temperature)

    return _node(p, (z,), backward_fn)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    m = z.values.max(axis=axis, keepdims=True)
    shifted = z.values - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_values = shifted - lse

    def backward_fn(g):
        p = np.exp(out_values)
        _accumulate(z, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out_values, (z,), backward_fn)


def unit_rows(x: Tensor) -> Tensor:
    """L2-normalize the last axis; zero-norm rows are a hard error."""
    norms = np.sqrt((x.values**2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot L2-normalize a zero-norm row")
    u = x.values / norms

    def backward_fn(g):
        dot = (g * u).sum(axis=-1, keepdims=True)
        _accumulate(x, (g - u * dot) / norms)

    return _node(u, (x,), backward_fn)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors, in [-1, 1]; differentiable in both."""
    nu = float(np.sqrt(u.values @ u.values))
    nv = float(np.sqrt(v.values @ v.values))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity undefined for zero-norm input")
    s = float(u.values @ v.values) / (nu * nv)

    def backward_fn(g):
        if u.requires_grad:
            _accumulate(u, g * (v.values / (nu * nv) - s * u.values / nu**2))
        if v.requires_grad:
            _accumulate(v, g * (u.values / (nu * nv) - s * v.values / nv**2))

    return _node(np.float64(s), (u, v), backward_fn)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit row."""
    c = logits.values.shape[-1]
    if not 0 <= label < c:
        raise IndexError(f"label {label} out of range for {c} classes")
    m = logits.values.max()
    shifted = logits.values - m
    lse = np.log(np.exp(shifted).sum())
    out_values = lse - shifted[label]

    def backward_fn(g):
        p = np.exp(shifted - lse)
        p[label] -= 1.0
        _accumulate(logits, g * p)

    return _node(np.float64(out_values), (logits,), backward_fn)


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of per-row -log softmax(logits)[label] over an (N, C) batch."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.values.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    m = logits.values.max(axis=1, keepdims=True)
    shifted = logits.values - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    out_values = (lse - shifted[rows, labels]).mean()

    def backward_fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / n)

    return _node(np.float64(out_values), (logits,), backward_fn)


# ---------------------------------------------------------------------------
# verification harness

def grad_check(fn, inputs, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-FD gradients.

    ``fn`` must be a deterministic scalar function of the given leaf tensors
    (it is re-run with perturbed values, so it must rebuild its graph on every
    call). Reports the worst entry as
    |analytic - fd| / max(1, |analytic|, |fd|); never raises on mismatch.
    """
    zero_grads(inputs)
    backward(fn(*inputs))
    analytic = [np.zeros_like(t.values) if t.grad is None else np.array(t.grad)
                for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn(*inputs).item()
            flat[i] = orig - step
            f_minus = fn(*inputs).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(ga_flat[i] - fd) / max(1.0, abs(ga_flat[i]), abs(fd))
            worst = max(worst, err)
    return worst
