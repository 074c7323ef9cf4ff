"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is a tape: every operation appends a node whose parents are its
inputs, so the topological order is fixed by construction order and the
backward sweep visits nodes in exactly the reverse of that order.  All
reductions run in numpy's deterministic evaluation order, which keeps
repeated evaluations bit-identical on one platform/build (a requirement
for the entropy-coding side of this project, where encoder and decoder
must reproduce the same probability tables).

Only the operations needed by the codec's layer set are provided; there is
no general broadcasting, no higher-order gradients.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

_ERF_DCOEF = 2.0 / np.sqrt(np.pi)


class GraphError(ValueError):
    """Shape or domain violation while building or evaluating the tape."""


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A node of the tape: a float64 array plus backward plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    _next_id = 0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        self.data = _as_f64(data)
        if _op == "leaf" and not np.all(np.isfinite(self.data)):
            raise GraphError("non-finite values entering the graph")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._id = Tensor._next_id
        Tensor._next_id += 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, id={self._id})"

    def item(self) -> float:
        if self.data.shape != ():
            raise GraphError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar node through the tape."""
        if self.data.shape != ():
            raise GraphError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node._id in visited or not node.requires_grad:
                continue
            visited.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ---- operator sugar ----
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise GraphError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise a + b; b may be 1-D and is then broadcast over rows."""
    a, b = _wrap(a), _wrap(b)
    row_bcast = b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]
    if not row_bcast:
        _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            if row_bcast:
                b._accum(g.reshape(-1, b.data.shape[0]).sum(axis=0))
            else:
                b._accum(g)

    out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    """Elementwise a * b; b may be 1-D and is then broadcast over rows."""
    a, b = _wrap(a), _wrap(b)
    row_bcast = b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]
    if not row_bcast:
        _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if row_bcast:
                gb = gb.reshape(-1, b.data.shape[0]).sum(axis=0)
            b._accum(gb)

    out._backward = bwd
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    row_bcast = b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]
    if not row_bcast:
        _check_same_shape("div", a, b)
    out = Tensor(a.data / b.data, _parents=(a, b), _op="div")

    def bwd(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            gb = -g * a.data / (b.data * b.data)
            if row_bcast:
                gb = gb.reshape(-1, b.data.shape[0]).sum(axis=0)
            b._accum(gb)

    out._backward = bwd
    return out


def scale(a, c: float) -> Tensor:
    """a * c for a python scalar c."""
    a = _wrap(a)
    c = float(c)
    out = Tensor(a.data * c, _parents=(a,), _op="scale")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * c)

    out._backward = bwd
    return out


def shift(a, c: float) -> Tensor:
    """a + c for a python scalar c."""
    a = _wrap(a)
    out = Tensor(a.data + float(c), _parents=(a,), _op="shift")

    def bwd(g):
        if a.requires_grad:
            a._accum(g)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    out = Tensor(y, _parents=(a,), _op="tanh")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (1.0 - y * y))

    out._backward = bwd
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = _sp.expit(a.data)
    out = Tensor(y, _parents=(a,), _op="sigmoid")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * y * (1.0 - y))

    out._backward = bwd
    return out


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.logaddexp(0.0, a.data), _parents=(a,), _op="softplus")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * _sp.expit(a.data))

    out._backward = bwd
    return out


def absolute(a) -> Tensor:
    """|a| with subgradient 0 at 0."""
    a = _wrap(a)
    out = Tensor(np.abs(a.data), _parents=(a,), _op="abs")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * np.sign(a.data))

    out._backward = bwd
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    out = Tensor(y, _parents=(a,), _op="exp")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * y)

    out._backward = bwd
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.log(a.data), _parents=(a,), _op="log")

    def bwd(g):
        if a.requires_grad:
            a._accum(g / a.data)

    out._backward = bwd
    return out


def erf(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(_sp.erf(a.data), _parents=(a,), _op="erf")

    def bwd(g):
        if a.requires_grad:
            a._accum(g * _ERF_DCOEF * np.exp(-a.data * a.data))

    out._backward = bwd
    return out


def lower_bound(a, bound: float) -> Tensor:
    """max(a, bound) that still passes gradients pushing a upward.

    Standard trick for clamping probability masses: where the input sits at
    the floor, only gradients that would increase it are let through, so the
    model can climb back out of the clamp.
    """
    a = _wrap(a)
    bound = float(bound)
    out = Tensor(np.maximum(a.data, bound), _parents=(a,), _op="lower_bound")

    def bwd(g):
        if a.requires_grad:
            passthrough = (a.data >= bound) | (g < 0)
            a._accum(g * passthrough)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra and shaping
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backward = bwd
    return out


def reduce_sum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _wrap(a)
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")

    def bwd(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, float(g)))

    out._backward = bwd
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(a.data.shape))

    out._backward = bwd
    return out


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    out._backward = bwd
    return out


def getitem(a, key) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data[key], _parents=(a,), _op="slice")

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a._accum(full)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    num = size + 2 * pad - k
    if num % stride != 0:
        raise GraphError(f"conv2d: non-integral output size for in={size} k={k} stride={stride} pad={pad}")
    return num // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return win.reshape(n, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    acc = np.zeros((n, c, hp, wp))
    cols6 = cols.reshape(n, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            acc[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols6[:, :, ki, kj]
    return acc


def conv2d(x, w, b, stride: int, pad: int) -> Tensor:
    """Batched 2-D cross-correlation: x (N,C,H,W), w (F,C,k,k), b (F,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise GraphError(f"conv2d: expected 4-D input/kernel, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    f, cw, k, k2 = w.data.shape
    if cw != c or k != k2 or b.data.shape != (f,):
        raise GraphError(f"conv2d: kernel {w.data.shape} / bias {b.data.shape} do not match input {x.data.shape}")
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = w.data.reshape(f, c * k * k)
    y = np.matmul(wmat, cols) + b.data[:, None]
    out = Tensor(y.reshape(n, f, oh, ow), _parents=(x, w, b), _op="conv2d")

    def bwd(g):
        gmat = g.reshape(n, f, oh * ow)
        if w.requires_grad:
            dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            w._accum(dw.reshape(f, c, k, k))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            dxp = _col2im(dcols, n, c, h + 2 * pad, wd + 2 * pad, k, stride, oh, ow)
            x._accum(dxp[:, :, pad:pad + h, pad:pad + wd])

    out._backward = bwd
    return out


def deconv2d(x, w, b, stride: int, pad: int) -> Tensor:
    """Transposed convolution: x (N,F,h,w), w (F,C,k,k), b (C,).

    Output spatial size is (h-1)*stride - 2*pad + k, the exact inverse of
    the conv2d shape map with the same stride/pad/kernel.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise GraphError(f"deconv2d: expected 4-D input/kernel, got {x.data.shape}, {w.data.shape}")
    n, f, h, wd = x.data.shape
    fw, c, k, k2 = w.data.shape
    if fw != f or k != k2 or b.data.shape != (c,):
        raise GraphError(f"deconv2d: kernel {w.data.shape} / bias {b.data.shape} do not match input {x.data.shape}")
    oh = (h - 1) * stride - 2 * pad + k
    ow = (wd - 1) * stride - 2 * pad + k
    if oh <= 0 or ow <= 0:
        raise GraphError(f"deconv2d: non-positive output size {oh}x{ow}")
    wmat = w.data.reshape(f, c * k * k)
    xmat = x.data.reshape(n, f, h * wd)
    cols = np.matmul(wmat.T, xmat)
    yp = _col2im(cols, n, c, oh + 2 * pad, ow + 2 * pad, k, stride, h, wd)
    y = yp[:, :, pad:pad + oh, pad:pad + ow] + b.data[None, :, None, None]
    out = Tensor(y, _parents=(x, w, b), _op="deconv2d")

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gcols = _im2col(gp, k, stride, h, wd)
        if x.requires_grad:
            dx = np.matmul(wmat, gcols)
            x._accum(dx.reshape(n, f, h, wd))
        if w.requires_grad:
            dw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0)
            w._accum(dw.reshape(f, c, k, k))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    out._backward = bwd
    return out
