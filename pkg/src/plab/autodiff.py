"""Tape-based reverse-mode differentiation over dense float64 tensors.

A ``Tensor`` wraps a numpy array. Ops are free functions; while a ``Tape``
is active (``with Tape() as tape:``) every op touching a tensor that
requires gradients records one node. ``tape.gradients(loss, params)``
replays the nodes in reverse, visiting each exactly once, and returns a
gradient per requested parameter (zeros for parameters the loss never
reached).

Broadcasting is deliberately restricted: ``add``/``mul`` accept either
equal shapes or a right operand whose shape is a suffix of the left's
(bias/gain over the leading dimensions). Everything is float64.
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

from .errors import ContractError, ShapeMismatchError

_uid_counter = itertools.count(1)
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 value; ``requires_grad`` marks it as differentiable."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out_uid", "in_uids", "backward")

    def __init__(self, out_uid, in_uids, backward):
        self.out_uid = out_uid
        self.in_uids = in_uids
        self.backward = backward


class Tape:
    """Records ops for one step; confined to a single thread while active."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor, params: list[Tensor]) -> dict[Tensor, np.ndarray]:
        """Gradient of a scalar loss w.r.t. each parameter (zeros if unreachable)."""
        if loss.data.shape != ():
            raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
        acc: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
        for node in reversed(self._nodes):
            g_out = acc.pop(node.out_uid, None)
            if g_out is None:
                continue
            for uid, g in zip(node.in_uids, node.backward(g_out)):
                if g is None:
                    continue
                if uid in acc:
                    acc[uid] = acc[uid] + g
                else:
                    acc[uid] = g
        out: dict[Tensor, np.ndarray] = {}
        for p in params:
            g = acc.get(p.uid)
            out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out.uid, tuple(t.uid for t in inputs), backward))
    return out


def _suffix_axes(a_shape, b_shape):
    """Leading axes of ``a`` that a suffix-shaped ``b`` broadcasts over."""
    k = len(a_shape) - len(b_shape)
    if k <= 0 or a_shape[k:] != b_shape:
        return None
    return tuple(range(k))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(go):
        return (go @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ go)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a suffix-shaped bias over leading axes."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return _record(out, (a, b), lambda go: (go, go))
    axes = _suffix_axes(a.shape, b.shape)
    if axes is None:
        raise ShapeMismatchError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(go):
        return (go, go.sum(axis=axes))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a suffix-shaped gain over leading axes."""
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        out = Tensor(ad * bd)
        return _record(out, (a, b), lambda go: (go * bd, go * ad))
    axes = _suffix_axes(a.shape, b.shape)
    if axes is None:
        raise ShapeMismatchError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    out = Tensor(ad * bd)

    def backward(go):
        return (go * bd, (go * ad).sum(axis=axes))

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda go: (go * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda go: (go * mask,))


_GELU_K = float(np.sqrt(2.0 / np.pi))
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximate GELU with its exact analytic derivative."""
    x = a.data
    u = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(go):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x**2)
        return (go * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _record(out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(go):
        return (y * (go - (go * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), backward)


LAYERNORM_EPS = 1e-5


def layernorm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine).

    The epsilon sits inside the square root, so constant rows map to
    (numerically) zero vectors instead of NaN.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    y = xc * inv
    out = Tensor(y)

    def backward(go):
        gm = go.mean(axis=-1, keepdims=True)
        gy = (go * y).mean(axis=-1, keepdims=True)
        return (inv * (go - gm - y * gy),)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    old = a.data.shape
    return _record(out, (a,), lambda go: (go.reshape(old),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda go: (np.transpose(go, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(go):
        return tuple(np.split(go, offsets, axis=axis))

    return _record(out, tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters back into zeros."""
    out = Tensor(a.data[key])
    shape = a.data.shape

    def backward(go):
        g = np.zeros(shape, dtype=np.float64)
        g[key] = go
        return (g,)

    return _record(out, (a,), backward)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis; gradient sums it back."""
    out = Tensor(np.broadcast_to(a.data, (n,) + a.data.shape).copy())
    return _record(out, (a,), lambda go: (go.sum(axis=0),))


def mean(a: Tensor) -> Tensor:
    """Mean over all entries, producing a scalar tensor."""
    out = Tensor(a.data.mean())
    shape, size = a.data.shape, a.data.size

    def backward(go):
        return (np.full(shape, float(go) / size),)

    return _record(out, (a,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeMismatchError(
            f"cross_entropy expects (batch, classes) logits and (batch,) labels, "
            f"got {logits.shape} and {labels.shape}"
        )
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    batch = z.shape[0]
    nll = lse - z[np.arange(batch), labels]
    out = Tensor(nll.mean())

    def backward(go):
        p = np.exp(z - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(batch), labels] -= 1.0
        return (p * (float(go) / batch),)

    return _record(out, (logits,), backward)
