"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records a :class:`Node` carrying a sequence
number drawn from a global counter, so the recorded order is the forward
execution order. :func:`backward` collects the nodes reachable from a scalar
loss and replays their backward rules in exactly the reverse of that order.

Operations broadcast like numpy; gradients flowing into a broadcast operand
are summed back to its shape.
"""

from __future__ import annotations

import itertools
import weakref
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

MASK_FILL = -1e9
LAYER_NORM_EPS = 1e-6

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class MaskError(ValueError):
    """An attention mask leaves some row with no admissible entry."""


class Node:
    __slots__ = ("seq", "parents", "backward_fn", "out_ref", "op")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable, out: "Tensor"):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.out_ref = weakref.ref(out)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense float64 array that can take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.node = Node(op, parents, backward_fn, out) if out.requires_grad else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- graph


class Graph:
    """Ordered record of the nodes reachable from a tensor."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        out = node.out_ref()
        g = grads.pop(id(out), None) if out is not None else None
        if g is None:
            continue
        out.grad = g if out.grad is None else out.grad + g
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is None:
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes act as a batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                # shared weight matrix: fold the batch axes into one GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", out, (a, b), bw)


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _result("abs", np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis), 1.0 / float(n))


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis))

    def bw(g):
        safe = np.where(out > 0.0, out, 1.0)
        factor = np.where(out > 0.0, g / safe, 0.0)
        return (np.expand_dims(factor, axis) * ad,)

    return _result("norm", out, (a,), bw)


# ---------------------------------------------------------- pointwise


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0.0))
    y = np.where(x > 0, x, neg)
    return _result("elu", y, (a,), lambda g: (g * np.where(x > 0, 1.0, neg + alpha),))


def dropout(a: Tensor, keep_prob: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``train`` is false or ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout keep probability must lie in (0, 1], got {keep_prob}")
    if not train or keep_prob == 1.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    m = (rng.random(a.shape) < keep_prob) / keep_prob
    return _result("dropout", a.data * m, (a,), lambda g: (g * m,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale/shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma, gbeta

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    y = _softmax_rows(a.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


def masked_softmax(logits: Tensor, allowed: np.ndarray) -> Tensor:
    """Row softmax over the last axis restricted to ``allowed`` entries.

    ``allowed`` is a boolean array broadcastable to ``logits``; blocked
    entries come out exactly zero and receive no gradient.
    """
    allowed = np.asarray(allowed, dtype=bool)
    if allowed.shape != logits.shape[-allowed.ndim:]:
        raise ShapeError(f"masked_softmax: mask shape {allowed.shape} vs logits {logits.shape}")
    if not allowed.any(axis=-1).all():
        raise MaskError("masked_softmax: mask blocks every entry of some row")
    z = np.where(allowed, logits.data, MASK_FILL)
    y = _softmax_rows(z)
    y = np.where(allowed, y, 0.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("masked_softmax", y, (logits,), bw)


# ---------------------------------------------------------- structural


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes`` when given."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}: {e}") from None
    n = len(tensors)
    return _result("stack", out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def index(a: Tensor, idx) -> Tensor:
    """numpy-style indexing (``slice`` in the op suite)."""
    shape = a.shape
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result("slice", np.array(out, copy=basic), (a,), bw)


slice_ = index


# ---------------------------------------------------------- recurrence


def lstm_sequence(xw: Tensor, w_h: Tensor, h0: Tensor, c0: Tensor) -> Tensor:
    """Unrolled LSTM over axis -2 of the input projections ``xw``.

    ``xw`` holds ``x_r W_x + b`` with gate blocks ordered ``[i | f | g | o]``
    (shape ``(B, L, 4d)``); ``w_h`` is the ``(d, 4d)`` recurrent matrix.
    Per step: ``z = xw_r + h W_h``, ``c = σ(f)·c + σ(i)·tanh(g)``,
    ``h = σ(o)·tanh(c)``. Returns every hidden state, ``(B, L, d)``. The whole
    recurrence is one tape node whose backward is truncation-free BPTT.
    """
    B, L, four_d = xw.shape
    d = four_d // 4
    if four_d != 4 * d or w_h.shape != (d, four_d) or h0.shape != (B, d) or c0.shape != (B, d):
        raise ShapeError(f"lstm_sequence: xw {xw.shape}, w_h {w_h.shape}, h0 {h0.shape}, c0 {c0.shape}")
    xd, wd = xw.data, w_h.data
    H = np.empty((B, L + 1, d))
    C = np.empty((B, L + 1, d))
    G = np.empty((B, L, four_d))  # activated gates
    H[:, 0], C[:, 0] = h0.data, c0.data
    for r in range(L):
        z = xd[:, r] + H[:, r] @ wd
        a = expit(z)
        a[:, 2 * d:3 * d] = np.tanh(z[:, 2 * d:3 * d])
        G[:, r] = a
        C[:, r + 1] = a[:, d:2 * d] * C[:, r] + a[:, :d] * a[:, 2 * d:3 * d]
        H[:, r + 1] = a[:, 3 * d:] * np.tanh(C[:, r + 1])

    def bw(gH):
        dZ = np.empty_like(G)
        dh = np.zeros((B, d))
        dc = np.zeros((B, d))
        for r in range(L - 1, -1, -1):
            a = G[:, r]
            i, f, g, o = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
            tc = np.tanh(C[:, r + 1])
            dh = dh + gH[:, r]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dZ[:, r]
            dz[:, :d] = dc * g * i * (1.0 - i)
            dz[:, d:2 * d] = dc * C[:, r] * f * (1.0 - f)
            dz[:, 2 * d:3 * d] = dc * i * (1.0 - g * g)
            dz[:, 3 * d:] = dh * tc * o * (1.0 - o)
            dh = dz @ wd.T
            dc = dc * f
        dW = H[:, :L].reshape(B * L, d).T @ dZ.reshape(B * L, four_d)
        return dZ, dW, dh, dc

    return _result("lstm_sequence", H[:, 1:].copy(), (xw, w_h, h0, c0), bw)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
