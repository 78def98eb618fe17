"""Minimal reverse-mode tape over numpy arrays.

Only the operations the policy networks actually use: dense and convolution
layers, leaky rectifiers, residual adds, masked log-softmax, gathers, segment
sums and squared-error reductions. Gradient checks in the tests pin every op.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -np.inf


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen = set()

        def build(t: Tensor):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t.parents:
                build(p)
            topo.append(t)

        build(self)
        self.grad = np.ones_like(self.value)
        for t in reversed(topo):
            if t.backward_fn is not None and t.grad is not None:
                t.backward_fn(t.grad)

    def zero_grad(self) -> None:
        self.grad = None


def _accum(t: Tensor, g) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value + b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Tensor(out_val, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value - b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Tensor(out_val, (a, b), backward)


def constant(value) -> Tensor:
    return Tensor(value)


def add_const(a: Tensor, c) -> Tensor:
    out_val = a.value + c

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))

    return Tensor(out_val, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: _accum(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_val = a.value @ b.value

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Tensor(out_val, (a, b), backward)


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    pos = a.value > 0
    out_val = np.where(pos, a.value, alpha * a.value)

    def backward(g):
        _accum(a, g * np.where(pos, 1.0, alpha))

    return Tensor(out_val, (a,), backward)


def log_softmax_masked(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log softmax over the legal entries of the last axis; illegal
    entries come out as -inf and receive no gradient."""
    legal = mask > 0
    logits = np.where(legal, a.value, NEG_INF)
    m = np.max(logits, axis=-1, keepdims=True)
    z = np.exp(logits - m)
    lse = m + np.log(z.sum(axis=-1, keepdims=True))
    out_val = logits - lse
    probs = np.where(legal, np.exp(out_val), 0.0)

    def backward(g):
        g = np.where(legal, g, 0.0)
        _accum(a, g - probs * g.sum(axis=-1, keepdims=True))

    return Tensor(out_val, (a,), backward)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per row: out[i] = a[i, idx[i]]."""
    rows = np.arange(a.value.shape[0])
    out_val = a.value[rows, idx]

    def backward(g):
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        _accum(a, full)

    return Tensor(out_val, (a,), backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather with repetition: out[i] = a[idx[i]]."""
    out_val = a.value[idx]

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(out_val, (a,), backward)


def segment_sum(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    out_val = np.zeros(n)
    np.add.at(out_val, seg, a.value)

    def backward(g):
        _accum(a, g[seg])

    return Tensor(out_val, (a,), backward)


def square(a: Tensor) -> Tensor:
    return Tensor(a.value ** 2, (a,), lambda g: _accum(a, 2.0 * a.value * g))


def mean(a: Tensor) -> Tensor:
    n = a.value.size

    def backward(g):
        _accum(a, np.full_like(a.value, float(g) / n))

    return Tensor(a.value.mean(), (a,), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.full_like(a.value, float(g)))

    return Tensor(a.value.sum(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    """Stride-1 zero-padded 2D convolution; x is (N, C, H, W), w is
    (F, C, kh, kw), b is (F,). Implemented with an explicit im2col so the
    backward pass is a plain matmul plus a scatter-add."""
    n, c, h, wdt = x.value.shape
    f, _, kh, kw = w.value.shape
    p = padding
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = h + 2 * p - kh + 1, wdt + 2 * p - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (N, C, oh, ow, kh, kw) -> (N*oh*ow, C*kh*kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    w_mat = w.value.reshape(f, c * kh * kw)
    out_val = (cols @ w_mat.T + b.value).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        _accum(b, g_mat.sum(axis=0))
        _accum(w, (g_mat.T @ cols).reshape(w.value.shape))
        g_cols = (g_mat @ w_mat).reshape(n, oh, ow, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + oh, j : j + ow] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        _accum(x, gxp[:, :, p : p + h, p : p + wdt])

    return Tensor(out_val, (x, w, b), backward)
