"""Dense n-d arrays with reverse-mode automatic differentiation.

Only the operations the rest of the package needs are provided. Every
differentiable op records its parents and a closure mapping the output
adjoint to parent adjoints; :meth:`Tensor.backward` replays those closures
in reverse creation order.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus an optional gradient and the op that produced it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._seq = next(_seq)
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- graph ------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        The graph is released afterwards; calling twice on the same loss
        raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph; rebuild the loss first")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            # free the closure (and the activations it holds)
            node._backward = None
            node._parents = ()
            node._consumed = True
        self._consumed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __rtruediv__(self, other):
        return elementwise(other, self, "div")

    def __neg__(self):
        return elementwise(self, -1.0, "mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None, keepdims=False):
        return reduce(self, "sum", axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce(self, "mean", axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------
def elementwise(a, b, kind: str) -> Tensor:
    """Broadcasting add/sub/mul/div."""
    ref = a if isinstance(a, Tensor) else b
    dtype = ref.dtype if isinstance(ref, Tensor) else DEFAULT_DTYPE
    a = as_tensor(a, dtype)
    b = as_tensor(b, dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None
    x, y = a.data, b.data
    if kind == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    elif kind == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)
    elif kind == "mul":
        out = x * y

        def bw(g):
            ga = _unbroadcast(g * y, x.shape) if a.requires_grad else None
            gb = _unbroadcast(g * x, y.shape) if b.requires_grad else None
            return ga, gb
    elif kind == "div":
        if np.any(y == 0):
            raise ZeroDivisionError("division by a tensor with zero entries")
        out = x / y

        def bw(g):
            ga = _unbroadcast(g / y, x.shape) if a.requires_grad else None
            gb = _unbroadcast(-g * x / (y * y), y.shape) if b.requires_grad else None
            return ga, gb
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _result(out, (a, b), bw, kind)


def add(a, b):
    return elementwise(a, b, "add")


def sub(a, b):
    return elementwise(a, b, "sub")


def mul(a, b):
    return elementwise(a, b, "mul")


def div(a, b):
    return elementwise(a, b, "div")


def square(x: Tensor) -> Tensor:
    d = x.data

    def bw(g):
        return (2.0 * d * g,)

    return _result(d * d, (x,), bw, "square")


def absolute(x: Tensor) -> Tensor:
    d = x.data

    def bw(g):
        return (np.sign(d) * g,)

    return _result(np.abs(d), (x,), bw, "abs")


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = np.matmul(x, y)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


# -- shape manipulation ----------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(x.data, axes), (x,), bw, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(x.data[index]), (x,), bw, "getitem")


def _fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# -- reductions --------------------------------------------------------------
def reduce(x: Tensor, kind: str = "sum", axes=None, keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (``None`` means all axes; ``[]`` means none)."""
    if axes is None:
        ax = tuple(range(x.ndim))
    else:
        if isinstance(axes, int):
            axes = [axes]
        ax = []
        for a in axes:
            if not -x.ndim <= a < x.ndim:
                raise ShapeError(f"axis {a} out of range for shape {x.shape}")
            ax.append(a % x.ndim)
        if len(set(ax)) != len(ax):
            raise ShapeError(f"repeated axis in {axes}")
        ax = tuple(sorted(ax))
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    if kind == "sum":
        out = x.data.sum(axis=ax, keepdims=keepdims) if ax else x.data.copy()
        scale = 1.0
    elif kind == "mean":
        out = x.data.mean(axis=ax, keepdims=keepdims) if ax else x.data.copy()
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    src = x.shape

    def bw(g):
        if not keepdims and ax:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * scale, src).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), bw, kind)


def tsum(x, axes=None, keepdims=False):
    return reduce(x, "sum", axes, keepdims)


def mean(x, axes=None, keepdims=False):
    return reduce(x, "mean", axes, keepdims)


# -- activations -------------------------------------------------------------
def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """relu / leaky_relu / sigmoid; the kink at 0 takes the positive-branch slope."""
    d = x.data
    if kind == "relu":
        pos = d >= 0
        out = np.where(pos, d, 0.0).astype(d.dtype)

        def bw(g):
            return (g * pos,)
    elif kind == "leaky_relu":
        if not 0 < slope < 1:
            raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
        pos = d >= 0
        factor = np.where(pos, 1.0, slope).astype(d.dtype)
        out = d * factor

        def bw(g):
            return (g * factor,)
    elif kind == "sigmoid":
        out = 0.5 * (np.tanh(0.5 * d) + 1.0)

        def bw(g):
            return (g * out * (1.0 - out),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _result(out, (x,), bw, kind)


def relu(x):
    return activation(x, "relu")


def leaky_relu(x, slope=0.2):
    return activation(x, "leaky_relu", slope)


def sigmoid(x):
    return activation(x, "sigmoid")


# -- convolution ---------------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding, NCHW layout.

    Lowered to a single GEMM over im2col patches laid out as (Cin*k*k, N*Ho*Wo).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    kk = kh * kw
    wmat = weight.data.reshape(cout, cin * kk)
    if stride == 1:
        # Flatten padded rows: every kernel offset becomes one contiguous slice
        # of length ho*wp ("wide" rows that include wp - wo junk columns).
        hp, wp = h + 2 * pad, w + 2 * pad
        xp = np.zeros((n, cin, hp + 1, wp), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
        flat = xp.reshape(n, cin, -1)
        span, ow = ho * wp, wp
        offsets = [i * wp + j for i in range(kh) for j in range(kw)]
        cols = np.empty((cin, kk, n, span), dtype=x.dtype)
        for k, off in enumerate(offsets):
            cols[:, k] = flat[:, :, off:off + span].transpose(1, 0, 2)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        span, ow = ho * wo, wo
        windows = [(slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))
                   for i in range(kh) for j in range(kw)]
        cols = np.empty((cin, kk, n, ho, wo), dtype=x.dtype)
        for k, (ri, cj) in enumerate(windows):
            cols[:, k] = xp[:, :, ri, cj].transpose(1, 0, 2, 3)
    cmat = cols.reshape(cin * kk, n * span)
    out = wmat @ cmat
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, ow)[..., :wo].transpose(1, 0, 2, 3))

    def bw(g):
        gw = ho * ow
        gmat = np.zeros((cout, n, ho, ow), dtype=g.dtype)
        gmat[..., :wo] = g.transpose(1, 0, 2, 3)
        gmat = gmat.reshape(cout, n * gw)
        g_w = (gmat @ cmat.T).reshape(weight.shape) if weight.requires_grad else None
        g_b = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        g_x = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kk, n, -1)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            if stride == 1:
                gflat = gxp.reshape(n, cin, -1)
                for k, off in enumerate(offsets):
                    gflat[:, :, off:off + span] += dcols[:, k].transpose(1, 0, 2)
            else:
                for k, (ri, cj) in enumerate(windows):
                    gxp[:, :, ri, cj] += dcols[:, k].reshape(cin, n, ho, wo).transpose(1, 0, 2, 3)
            g_x = gxp[:, :, pad:pad + h, pad:pad + w]
        return g_x, g_w, g_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "conv2d")


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if scale == 1:
        return reshape(x, x.shape)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, scale, w, scale)).reshape(
        n, c, h * scale, w * scale)

    def bw(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _result(np.ascontiguousarray(out), (x,), bw, "upsample")


# -- discrete Fourier transform ---------------------------------------------
@lru_cache(maxsize=None)
def _dft_basis(n: int):
    k = np.arange(n)
    # integer product mod n keeps the angle exact for large n
    ang = 2.0 * np.pi * ((k[:, None] * k[None, :]) % n) / n
    return np.cos(ang), np.sin(ang)


def dft2(x: Tensor) -> Tensor:
    """Channel-wise 2-d DFT of an (N, C, H, W) tensor.

    Returns (N, C, 2, H, W) holding the real and imaginary planes, with the
    unnormalised forward convention ``F[u,v] = sum x[h,w] e^{-2 pi i (uh/H + vw/W)}``.
    Evaluated as two dense basis products (no FFT).
    """
    if x.ndim != 4:
        raise ShapeError(f"dft2 expects (N, C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    ch, sh = (a.astype(x.dtype) for a in _dft_basis(h))
    cw, sw = (a.astype(x.dtype) for a in _dft_basis(w))
    d = x.data
    xc = d @ cw
    xs = d @ sw
    re = ch @ xc - sh @ xs
    im = -(sh @ xc + ch @ xs)
    out = np.stack([re, im], axis=2)

    def bw(g):
        gr, gi = g[:, :, 0], g[:, :, 1]
        # basis matrices are symmetric, so the adjoint reuses them untransposed
        return ((ch @ gr - sh @ gi) @ cw - (sh @ gr + ch @ gi) @ sw,)

    return _result(out, (x,), bw, "dft2")
