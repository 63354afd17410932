"""Small reverse-mode autodiff over float64 numpy arrays.

Graphs are dynamic: every op records its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the graph once in
reverse topological order. Gradients accumulate across calls until
``zero_grad`` is called, mirroring the usual framework convention.

Broadcasting is deliberately limited to scalar-vs-tensor and equal shapes.
Row-vector bias addition has its own op (``add_rowvec``) so shape mistakes
surface as errors instead of silently broadcasting.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DTYPE = np.float64

_BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: _BackwardFn | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: _BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or t.data.shape == (1,)


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    if grad.shape == target.shape:
        return grad
    return np.sum(grad).reshape(target.shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape} "
                             "(only scalar or equal-shape operands)")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor._from_op(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return Tensor._from_op(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return Tensor._from_op(out_data, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(DTYPE)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)
    return Tensor._from_op(out_data, (x,), lambda g: (g * out_data,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive input (min={x.data.min():.3g})")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.sum(x.data), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor._from_op(np.mean(x.data), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"slice_cols[{start}:{stop}] invalid for shape {x.shape}")

    def bw(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[:, start:stop], (x,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), bw)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """``x + v`` with ``v`` (shape ``(n,)``) added to every row of ``x`` (``(m, n)``)."""
    if x.data.ndim != 2 or v.shape != (x.shape[1],):
        raise DimensionError(f"add_rowvec: shapes {x.shape} and {v.shape} do not match")
    return Tensor._from_op(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# normalisers and losses
# ---------------------------------------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: shapes {x.shape}, {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        n = x.shape[1]
        dx = inv / n * (n * gx - gx.sum(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[0] < 1 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, labels]))

    def bw(g):
        d = np.exp(z - logsumexp[:, None])
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return Tensor._from_op(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# custom-gradient nodes
# ---------------------------------------------------------------------------

def custom_grad_node(forward_value, source: Tensor) -> Tensor:
    """Output carries ``forward_value`` but routes its gradient unchanged to ``source``.

    This is the straight-through estimator contract: the forward value is
    treated as a constant, and backward behaves as if the op were identity.
    """
    fv = forward_value.data if isinstance(forward_value, Tensor) else np.asarray(forward_value, dtype=DTYPE)
    if fv.shape != source.shape:
        raise DimensionError(f"custom_grad_node: forward {fv.shape} vs passthrough {source.shape}")
    return Tensor._from_op(fv.copy(), (source,), lambda g: (g,))


def group_mix(weights: Tensor, candidates: Sequence[Tensor], group_size: int,
              frozen: np.ndarray | None = None, frozen_value: Tensor | None = None) -> Tensor:
    """Column-grouped convex mixture of candidate matrices.

    ``weights`` has shape ``(G, K)``; each of the ``K`` candidates has shape
    ``(in, G * group_size)``. Column block ``g`` of the output is
    ``sum_k weights[g, k] * candidates[k][:, block g]``. Groups flagged in
    ``frozen`` copy their block from ``frozen_value`` instead, and receive
    no gradient on their ``weights`` row.
    """
    G, K = weights.shape
    if len(candidates) != K:
        raise DimensionError(f"group_mix: {K} mixture columns but {len(candidates)} candidates")
    shape = candidates[0].shape
    if len(shape) != 2 or shape[1] != G * group_size or any(c.shape != shape for c in candidates):
        raise DimensionError(f"group_mix: candidate shapes {[c.shape for c in candidates]} "
                             f"incompatible with {G} groups of {group_size}")
    frozen = np.zeros(G, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    if frozen.any() and (frozen_value is None or frozen_value.shape != shape):
        raise DimensionError("group_mix: frozen groups need a frozen_value of candidate shape")

    w = weights.data.copy()
    w[frozen] = 0.0
    col_w = np.repeat(w, group_size, axis=0)  # (out, K)
    stacked = np.stack([c.data for c in candidates])  # (K, in, out)
    out = np.einsum("kio,ok->io", stacked, col_w)
    col_frozen = np.repeat(frozen, group_size)
    if frozen.any():
        out[:, col_frozen] = frozen_value.data[:, col_frozen]

    parents = [weights, *candidates] + ([frozen_value] if frozen_value is not None else [])

    def bw(g):
        per_col = np.einsum("io,kio->ok", g, stacked)  # (out, K)
        gw = per_col.reshape(G, group_size, K).sum(axis=1)
        gw[frozen] = 0.0
        grads = [gw] + [g * col_w[:, k] for k in range(K)]
        if frozen_value is not None:
            grads.append(g * col_frozen)
        return grads

    return Tensor._from_op(out, parents, bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every upstream tensor with requires_grad.

    Calling twice without ``zero_grad`` adds the second pass on top of the first.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
            key = id(parent)
            upstream[key] = upstream[key] + pg if key in upstream else pg
