"""Dense float64 tensors with a reverse-mode differentiation tape.

Only the operations the fusion network needs are provided. Every op accepts
either a single sample (e.g. ``H x W x C``) or a batch with extra leading
dimensions (``N x H x W x C``); no other broadcasting is supported.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = ...
    tape.backward(loss)

Outside a tape, ops run as plain numpy code (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        # leaves own a gradient buffer; op outputs get gradients only transiently
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _result(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    return out


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    A tape is bound to the thread that entered it. Nodes are appended in
    execution order, so replaying them backwards is a valid topological
    traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output, backward) -> None:
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

        Calling this twice without zeroing adds the gradients twice.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is not None:
                    t.grad += gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        # a leaf loss is never a node output, so its seed gradient is still pending
        if loss.grad is not None:
            loss.grad += 1.0


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def custom_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as an op output and record ``backward`` if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = _result(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(tuple(inputs), out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return custom_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return scale(sum_all(x), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    data = x.data.reshape(shape)
    return custom_op(data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return custom_op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return custom_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x: Tensor) -> Tensor:
    return x


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading shape mismatch {xs[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in xs]
    splits = np.cumsum(widths)[:-1]
    data = np.concatenate([t.data for t in xs], axis=-1)
    return custom_op(data, tuple(xs), lambda g: np.split(g, splits, axis=-1))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of ``(..., H, W, C)``."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (..., H, W, C), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    shape = x.shape

    def back(g):
        g = g[..., None, None, :] / (h * w)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(x.data.mean(axis=(-3, -2)), (x,), back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``training`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return custom_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (
            g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
            np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None,
        )

    return custom_op(ad @ bd, (a, b), back)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of the last axis: ``x @ w + b`` with ``w`` shaped (C_in, C_out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match {w.shape[1]} outputs")
    xd, wd = x.data, w.data

    def back(g):
        x2 = xd.reshape(-1, xd.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, x2.T @ g2, g2.sum(axis=0)

    return custom_op(xd @ wd + b.data, (x, w, b), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis independently at every position."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must both be ({c},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, c)
        dgamma = (flat_g * xhat.reshape(-1, c)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return custom_op(xhat * gd + beta.data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# convolution

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def conv2d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, one pixel of zero padding per border.

    ``x`` is ``(..., H, W, C_in)``, ``w`` is ``(3, 3, C_in, d)``, ``b`` is ``(d,)``.
    """
    if w.ndim != 4 or w.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d_same: kernel must be (3, 3, C_in, d), got {w.shape}")
    if x.ndim < 3:
        raise ShapeError(f"conv2d_same: input must be (..., H, W, C), got {x.shape}")
    c_in, d = w.shape[2], w.shape[3]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv2d_same: input has {x.shape[-1]} channels, kernel expects {c_in}")
    if b.shape != (d,):
        raise ShapeError(f"conv2d_same: bias {b.shape} does not match {d} filters")

    xd = x.data
    lead = xd.shape[:-3]
    h, wd_ = xd.shape[-3], xd.shape[-2]
    x4 = xd.reshape((-1, h, wd_, c_in))
    xp = np.pad(x4, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack([xp[:, dy : dy + h, dx : dx + wd_, :] for dy, dx in _OFFSETS], axis=3)
    cols = cols.reshape(-1, 9 * c_in)
    wmat = w.data.reshape(9 * c_in, d)
    out = (cols @ wmat + b.data).reshape(lead + (h, wd_, d))

    def back(g):
        g2 = g.reshape(-1, d)
        dw = (cols.T @ g2).reshape(3, 3, c_in, d)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(-1, h, wd_, 9, c_in)
            dxp = np.zeros_like(xp)
            for k, (dy, dx_) in enumerate(_OFFSETS):
                dxp[:, dy : dy + h, dx_ : dx_ + wd_, :] += dcols[:, :, :, k, :]
            dx = dxp[:, 1:-1, 1:-1, :].reshape(xd.shape)
        return dx, dw, db

    return custom_op(out, (x, w, b), back)
