"""Dense f64 tensors with reverse-mode automatic differentiation.

Only the handful of operations the decomposed text CNN needs are provided.
Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks that implicit graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __matmul__(self, other):
        return affine(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward_fn if needs else None, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting (also covers scalar scaling)."""
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def bw(g):
        return (g * on,)

    return _make(np.where(on, x.data, 0.0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), bw, "sigmoid")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the first axis."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return _make(x.data[i], (x,), bw, "index")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _make(out, tuple(parts), bw, "concat")


# ------------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.array(x.data.sum()), (x,), bw, "sum")


def l1_norm(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return _make(np.array(np.abs(x.data).sum()), (x,), bw, "l1")


def sq_l2_norm(x: Tensor) -> Tensor:
    def bw(g):
        return (2.0 * g * x.data,)

    return _make(np.array(np.square(x.data).sum()), (x,), bw, "sql2")


def total(terms: Iterable[Tensor]) -> Tensor:
    out = None
    for t in terms:
        out = t if out is None else add(out, t)
    return out if out is not None else Tensor(0.0)


# ------------------------------------------------------------------ linear algebra


def affine(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape [n] or [batch, n] and ``w`` of shape [n, m]."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weights {w.shape}")

    def bw(g):
        if x.data.ndim == 1:
            return g @ w.data.T, np.outer(x.data, g)
        return g @ w.data.T, x.data.T @ g

    return _make(x.data @ w.data, (x, w), bw, "affine")


def embed(indices, table: np.ndarray) -> Tensor:
    """Constant lookup into a frozen table; out-of-range ids map to the last (OOV) row."""
    idx = np.asarray(indices, dtype=np.int64)
    oov = table.shape[0] - 1
    idx = np.where((idx < 0) | (idx >= table.shape[0]), oov, idx)
    return Tensor(table[idx])


def conv1d_maxpool(x: Tensor, filters: Tensor, lengths=None) -> Tensor:
    """Valid 1-D convolution over the token axis followed by max-over-time pooling.

    ``x`` is [L, D] (one document) or [batch, L, D] with ``lengths`` giving the
    number of real rows of each document; windows reaching past a document's
    length are excluded from the max. ``filters`` is [F, D, N]. Ties in the max
    go to the lowest window position.
    """
    single = x.data.ndim == 2
    xd = x.data[None] if single else x.data
    if filters.data.ndim != 3:
        raise ShapeError(f"conv1d_maxpool: filters must be [F, D, N], got {filters.shape}")
    F, D, N = filters.shape
    bsz, L, xD = xd.shape
    if xD != D:
        raise ShapeError(f"conv1d_maxpool: input dim {xD} != filter dim {D}")
    lens = np.full(bsz, L) if lengths is None else np.asarray(lengths, dtype=np.int64)
    if lens.shape != (bsz,) or np.any(lens > L):
        raise ShapeError("conv1d_maxpool: lengths do not match the input batch")
    if np.any(lens < F):
        raise ShapeError(f"conv1d_maxpool: document shorter than filter size {F}")

    P = L - F + 1
    # [bsz, P, D, F] -> [bsz, P, F*D], matching filters reshaped to [F*D, N]
    windows = sliding_window_view(xd, F, axis=1).transpose(0, 1, 3, 2).reshape(bsz, P, F * D)
    w2 = filters.data.reshape(F * D, N)
    scores = windows @ w2
    invalid = np.arange(P)[None, :] > (lens - F)[:, None]
    scores[invalid] = -np.inf
    arg = scores.argmax(axis=1)  # [bsz, N], first max wins
    out = np.take_along_axis(scores, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        g2 = g[None] if single else g
        rows = np.arange(bsz)[:, None]
        picked = windows[rows, arg]  # [bsz, N, F*D]
        gw = np.einsum("bnk,bn->kn", picked, g2).reshape(F, D, N)
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            contrib = np.einsum("fdn,bn->bnfd", filters.data, g2)
            b_idx = np.broadcast_to(rows[:, :, None], (bsz, N, F))
            p_idx = arg[:, :, None] + np.arange(F)[None, None, :]
            np.add.at(gx, (b_idx, p_idx), contrib)
            if single:
                gx = gx[0]
        return gx, gw

    return _make(out[0] if single else out, (x, filters), bw, "conv1d_maxpool")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; ``logits`` is [L] or [batch, L]."""
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {z.shape[0]} rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise IndexError(f"label out of range for {z.shape[1]} classes")
    top = z.argmax(axis=1)
    rows = np.arange(z.shape[0])
    shifted = z - z[rows, top][:, None]
    rest = np.exp(shifted)
    rest[rows, top] = 0.0
    lse = np.log1p(rest.sum(axis=1))  # the max term contributes exactly 1
    loss = float(np.mean(lse - shifted[rows, y]))

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1.0
        p *= g / z.shape[0]
        return (p[0] if single else p,)

    return _make(np.array(loss), (logits,), bw, "softmax_xent")


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
    """Populate ``.grad`` on every trainable leaf reachable from ``root``.

    If ``wrt`` is given, returns their gradients in order; leaves with no path
    to ``root`` get zeros.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if wrt is not None:
        zero_grad(wrt)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if wrt is None:
        return None
    out = []
    for leaf in wrt:
        out.append(np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad)
    return out


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
