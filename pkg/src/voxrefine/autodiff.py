"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and remembers how it was produced.
``backward(loss)`` walks the tape once and ADDS the resulting gradients
into each tensor's persistent ``grad`` buffer, so calling it twice
without :func:`zero_grads` accumulates exactly twice the gradient.
Within one backward pass gradients flow through a pass-local map, which
is what makes that accumulation contract exact.

The op set is the minimum the actor-critic needs: 3D same-padding
convolution (im2col + matmul), relu, log-softmax over the channel axis,
channel gather/scatter for chosen actions, exp, and scalar reductions
with elementwise arithmetic. Convolution inputs are re-expanded during
the backward pass instead of caching the im2col matrix; this trades a
little compute for keeping whole-episode tapes small.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

_Backward = Callable[[np.ndarray, dict[int, np.ndarray]], None]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_needs")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: _Backward | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._needs = requires_grad or any(p._needs for p in _parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def const(data) -> Tensor:
    return Tensor(data)


def _flow_add(flow: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if not t._needs:
        return
    key = id(t)
    if key in flow:
        flow[key] = flow[key] + g
    else:
        flow[key] = g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a gradient onto a parent that broadcast from `shape`."""
    if g.shape == shape:
        return g
    if shape == () or all(s == 1 for s in shape):
        return np.asarray(g.sum()).reshape(shape)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into `.grad` for every tensor on the tape."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs and id(p) not in seen:
                stack.append((p, False))
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is not None:
            node._backward(g, flow)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def back(g, flow):
        _flow_add(flow, a, _reduce_to(g, a.data.shape))
        _flow_add(flow, b, _reduce_to(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def back(g, flow):
        _flow_add(flow, a, _reduce_to(g, a.data.shape))
        _flow_add(flow, b, _reduce_to(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def back(g, flow):
        _flow_add(flow, a, _reduce_to(g * b.data, a.data.shape))
        _flow_add(flow, b, _reduce_to(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g, flow):
        _flow_add(flow, x, g * c)

    return Tensor(x.data * c, _parents=(x,), _backward=back)


def square(x: Tensor) -> Tensor:
    def back(g, flow):
        _flow_add(flow, x, g * (2.0 * x.data))

    return Tensor(x.data * x.data, _parents=(x,), _backward=back)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def back(g, flow):
        _flow_add(flow, x, g * out_data)

    return Tensor(out_data, _parents=(x,), _backward=back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def back(g, flow):
        _flow_add(flow, x, g * mask)

    return Tensor(np.where(mask, x.data, 0.0), _parents=(x,), _backward=back)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)

    def back(g, flow):
        _flow_add(flow, x, g * inside)

    return Tensor(np.clip(x.data, lo, hi), _parents=(x,), _backward=back)


def sum_all(x: Tensor) -> Tensor:
    def back(g, flow):
        _flow_add(flow, x, np.full(x.data.shape, float(g)))

    return Tensor(x.data.sum(), _parents=(x,), _backward=back)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g, flow):
        _flow_add(flow, x, np.full(x.data.shape, float(g) / n))

    return Tensor(x.data.mean(), _parents=(x,), _backward=back)


def add_n(terms: list[Tensor]) -> Tensor:
    """Sum of same-shape tensors (left fold)."""
    if not terms:
        raise ValueError("add_n needs at least one term")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


# ---------------------------------------------------------------------------
# channel-axis ops (arrays shaped (C, nx, ny, nz))

def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over axis 0 (the channel axis), numerically stable."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    expv = np.exp(shifted)
    z = expv.sum(axis=0, keepdims=True)
    probs = expv / z
    out_data = shifted - np.log(z)

    def back(g, flow):
        _flow_add(flow, x, g - probs * g.sum(axis=0, keepdims=True))

    return Tensor(out_data, _parents=(x,), _backward=back)


def select_channel(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather one channel per spatial position: out[v] = x[index[v], v]."""
    idx = np.asarray(index)
    if idx.shape != x.data.shape[1:]:
        raise ValueError("index shape must match the spatial dims")
    if idx.min() < 0 or idx.max() >= x.data.shape[0]:
        raise ValueError("channel index out of range")
    idx = idx[None].astype(np.intp)
    out_data = np.take_along_axis(x.data, idx, axis=0)[0]

    def back(g, flow):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[None], axis=0)
        _flow_add(flow, x, full)

    return Tensor(out_data, _parents=(x,), _backward=back)


# ---------------------------------------------------------------------------
# 3D convolution

def _conv_raw(x: np.ndarray, w: np.ndarray, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Same-padding dilated conv; returns (out, im2col matrix)."""
    c_in, nx, ny, nz = x.shape
    c_out, c_in_w, k, _, _ = w.shape
    if c_in_w != c_in:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    span = dilation * (k - 1) + 1
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (span, span, span), axis=(1, 2, 3))
    if dilation > 1:
        win = win[..., ::dilation, ::dilation, ::dilation]
    # (nvox, c_in*k^3); copies once, feeds one BLAS matmul
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(nx * ny * nz, c_in * k ** 3)
    out = cols @ w.reshape(c_out, -1).T
    return out.T.reshape(c_out, nx, ny, nz), cols


def conv3d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    """3D convolution with odd cubic kernels and same zero padding.

    Shapes: x (c_in, nx, ny, nz), w (c_out, c_in, k, k, k), b (c_out,).
    """
    c_out, c_in, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if w.data.ndim != 5 or w.data.shape[3] != k or w.data.shape[4] != k:
        raise ValueError("kernel must be (c_out, c_in, k, k, k)")
    if k % 2 != 1:
        raise ValueError("kernel size must be odd for same padding")
    if b.data.shape != (c_out,):
        raise ValueError("bias must be (c_out,)")
    out_data, _ = _conv_raw(x.data, w.data, dilation)
    out_data += b.data[:, None, None, None]

    def back(g, flow):
        g2 = g.reshape(c_out, -1)
        if b._needs:
            _flow_add(flow, b, g2.sum(axis=1))
        if w._needs:
            _, cols = _conv_raw(x.data, w.data, dilation)
            _flow_add(flow, w, (g2 @ cols).reshape(w.data.shape))
        if x._needs:
            # transpose conv == conv with spatially flipped, channel-swapped kernel
            w_t = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            dx, _ = _conv_raw(g, w_t, dilation)
            _flow_add(flow, x, dx)

    return Tensor(out_data, _parents=(x, w, b), _backward=back)
