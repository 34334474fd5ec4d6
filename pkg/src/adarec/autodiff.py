"""Reverse-mode differentiation over small dense float64 arrays.

Every value in a graph is a :class:`Tensor`. A tensor produced by a primitive
remembers its parents and a closure that maps the output gradient to parent
gradients; :func:`backward` walks the graph in reverse topological order.

Only what the recommender stack needs is implemented. Arrays have rank <= 3
(batch x time x channels); attention splits heads internally so the public
surface never exceeds that rank.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

LN_EPS = 1e-5
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when an operator receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or infinity appears in a tensor."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")


class Tensor:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 op: str = "leaf", _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx: int):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a primitive's output, recording the graph edge only when needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=tuple(parents), _backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and linear primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    """Broadcasting product; used for scalar gates and constant masks."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry a leading batch axis when ``b`` is 2-D."""
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape up to rank 2)."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    out = table.data[ids]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make(out, "embedding", (table,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _make(np.where(pos, x.data, 0.0), "relu", (x,), backward)


def log(x: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; with ``floor`` the input is clipped from below first."""
    if floor is None:
        if (x.data <= 0).any():
            raise NonFiniteError("log of a non-positive value")
        clipped = x.data
        live = np.ones_like(x.data, dtype=bool)
    else:
        live = x.data > floor
        clipped = np.where(live, x.data, floor)

    def backward(g):
        return (np.where(live, g / clipped, 0.0),)

    return _make(np.log(clipped), "log", (x,), backward)


def index(x: Tensor, i: int) -> Tensor:
    """Select ``x[i]`` along the first axis."""
    if not -x.shape[0] <= i < x.shape[0]:
        raise ShapeError(f"index {i} out of range for shape {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[i] = g
        return (grad,)

    return _make(x.data[i].copy(), "index", (x,), backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: nothing to stack")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shape mismatch {sorted(shapes)}")

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors]), "stack", tensors, backward)


def straight_through(y: Tensor) -> Tensor:
    """One-hot of ``argmax(y)`` in the forward value, identity gradient to ``y``.

    Ties resolve to the lowest index.
    """
    hard = np.zeros_like(y.data)
    np.put_along_axis(hard, np.argmax(y.data, axis=-1)[..., None], 1.0, axis=-1)

    def backward(g):
        return (g,)

    return _make(hard, "straight_through", (y,), backward)


# ---------------------------------------------------------------------------
# normalisation and probability primitives


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout. The keep mask is drawn from ``rng``; no rng means eval mode."""
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, "dropout", (x,), backward)


# ---------------------------------------------------------------------------
# sequence primitives (inputs are batch x time x channels)


def _check_seq(x: Tensor, op: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected (batch, time, channels), got {x.shape}")


def conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1,
           padding: Optional[tuple] = None) -> Tensor:
    """1-D convolution along time with kernel ``w`` of shape (k, d_in, d_out).

    ``padding`` is a (left, right) pair of zero rows; it defaults to the causal
    choice ``((k - 1) * dilation, 0)`` so position t never sees t' > t.
    """
    _check_seq(x, "conv1d")
    k, d_in, d_out = w.shape
    if x.shape[2] != d_in or b.shape != (d_out,):
        raise ShapeError(f"conv1d: shape mismatch {x.shape} vs {w.shape}")
    left, right = padding if padding is not None else ((k - 1) * dilation, 0)
    n, t, _ = x.shape
    t_out = t + left + right - (k - 1) * dilation
    if t_out < 1:
        raise ShapeError(f"conv1d: sequence of length {t} too short for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    cols = np.stack([xp[:, j * dilation: j * dilation + t_out] for j in range(k)], axis=2)
    cols = cols.reshape(n, t_out, k * d_in)
    w2 = w.data.reshape(k * d_in, d_out)
    out = cols @ w2 + b.data

    def backward(g):
        gw = (cols.reshape(-1, k * d_in).T @ g.reshape(-1, d_out)).reshape(w.shape)
        gb = g.sum(axis=(0, 1))
        gcols = (g @ w2.T).reshape(n, t_out, k, d_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j * dilation: j * dilation + t_out] += gcols[:, :, j]
        return gxp[:, left: left + t], gw, gb

    return _make(out, "conv1d", (x, w, b), backward)


def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    t = x.shape[1]
    return np.stack([xp[:, j: j + t] for j in range(k)], axis=2)


def max_pool1d(x: Tensor, k: int = 3) -> Tensor:
    """Window maximum over the current and k-1 previous steps (zero left padding)."""
    _check_seq(x, "max_pool1d")
    win = _pool_windows(x.data, k)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        n, t, d = x.shape
        gxp = np.zeros((n, t + k - 1, d))
        src = np.arange(t)[None, :, None] + arg
        np.add.at(gxp, (np.arange(n)[:, None, None], src, np.arange(d)[None, None, :]), g)
        return (gxp[:, k - 1:],)

    return _make(out, "max_pool1d", (x,), backward)


def avg_pool1d(x: Tensor, k: int = 3) -> Tensor:
    """Window mean over the current and k-1 previous steps; padding counts as zeros."""
    _check_seq(x, "avg_pool1d")
    out = _pool_windows(x.data, k).sum(axis=2) / k

    def backward(g):
        t = x.shape[1]
        gp = np.pad(g / k, ((0, 0), (0, k - 1), (0, 0)))
        return (np.stack([gp[:, j: j + t] for j in range(k)]).sum(axis=0),)

    return _make(out, "avg_pool1d", (x,), backward)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1,
              allowed: Optional[np.ndarray] = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``allowed`` is a boolean (batch, query, key) or (query, key) array; it
    defaults to the causal lower triangle. Every query must allow at least one
    key.
    """
    for name, x in (("q", q), ("k", k), ("v", v)):
        _check_seq(x, f"attention({name})")
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: shape mismatch {q.shape} vs {k.shape} vs {v.shape}")
    n, t, d = q.shape
    if d % n_heads:
        raise ShapeError(f"attention: width {d} not divisible by {n_heads} heads")
    if allowed is None:
        allowed = causal_mask(t)
    allowed = np.broadcast_to(allowed, (n, t, t))
    if not allowed.any(axis=-1).all():
        raise ShapeError("attention: a query row has no admissible key")
    dh = d // n_heads
    c = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    mask = allowed[:, None]
    scores = np.where(mask, (qh @ kh.transpose(0, 1, 3, 2)) * c, -np.inf)
    p = np.exp(scores - scores.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(n, t, d)

    def backward(g):
        gh = split(g)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * c
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(n, t, d)

        return merge(gq), merge(gk), merge(gv)

    return _make(out, "attention", (q, k, v), backward)


# ---------------------------------------------------------------------------
# reductions and losses


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / count)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _make(np.asarray((diff * diff).mean()), "mse", (a, b), backward)


def kl_div(p: Tensor, q: Tensor, mask: Optional[np.ndarray] = None,
           floor: float = PROB_FLOOR) -> Tensor:
    """KL(p || q) along the last axis, averaged over rows selected by ``mask``.

    ``q`` is clipped from below at ``floor`` before the log; ``0 log 0`` is 0.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shape mismatch {p.shape} vs {q.shape}")
    if (p.data < 0).any() or (q.data < 0).any():
        raise ValueError("kl_div: probabilities must be nonnegative")
    rows_shape = p.shape[:-1]
    w = np.ones(rows_shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != rows_shape:
        raise ShapeError(f"kl_div: mask shape {w.shape} vs rows {rows_shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("kl_div: mask selects no rows")
    w = w / total
    qc = np.maximum(q.data, floor)
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1.0))
    rows = np.where(pos, p.data * (logp - np.log(qc)), 0.0).sum(axis=-1)
    wr = w[..., None]

    def backward(g):
        logp_floor = np.log(np.maximum(p.data, floor))
        gp = g * wr * (logp_floor + 1.0 - np.log(qc))
        gq = np.where(q.data > floor, -g * wr * p.data / qc, 0.0)
        return gp, gq

    return _make(np.asarray((rows * w).sum()), "kl_div", (p, q), backward)


# ---------------------------------------------------------------------------


def op_library() -> dict:
    """Name -> callable for every differentiable primitive the models use."""
    return {
        "add": add,
        "multiply_by_scalar": mul,
        "matmul": matmul,
        "embedding": embedding,
        "causal_dilated_conv1d": conv1d,
        "relu": relu,
        "layer_norm": layer_norm,
        "softmax": softmax,
        "log": log,
        "mse": mse,
        "kl_div": kl_div,
        "dropout": dropout,
        "max_pool1d": max_pool1d,
        "avg_pool1d": avg_pool1d,
        "attention": attention,
        "sum": sum,
        "mean": mean,
    }


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict:
    """Back-propagate from a scalar ``root``.

    Returns ``{leaf: gradient}`` for every reachable leaf with
    ``requires_grad``; the same arrays are stored on ``leaf.grad``.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for g in leaves.values():
        _check_finite(g, "backward")
    return leaves


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Largest relative gap between the analytic gradient of ``fn`` and central differences.

    The relative error of each component uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"finite_difference_check: fn must be scalar, got {out.shape}")
    grads = backward(out)
    analytic = grads.get(x, np.zeros_like(base))
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            shifted = base.copy().reshape(-1)
            shifted[i] += sign * eps
            try:
                vals.append(float(fn(Tensor(shifted.reshape(base.shape))).data))
            except NonFiniteError as exc:
                raise NonFiniteError(f"fn is non-finite at perturbed component {i}: {exc}") from exc
        flat[i] = (vals[0] - vals[1]) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max()) if base.size else 0.0
