"""Minimal dense tensor with reverse-mode differentiation.

Every value is a float64 numpy array.  Operations record their parents and a
vector-Jacobian closure; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates adjoints into ``.grad``.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class UninitializedStatisticsError(RuntimeError):
    """Raised when batch norm is evaluated before any training pass."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


class Tensor:
    """A float64 array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # ----------------------------------------------------------------- basics
    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- autograd
    def backward(self, seed=None) -> None:
        """Propagate adjoints from this node to every upstream leaf.

        ``seed`` defaults to ones (so a scalar loss gets d loss/d loss = 1).
        """
        if seed is None:
            seed = np.ones_like(self.data)
        seed = _as_array(seed)
        if seed.shape != self.data.shape:
            raise DimensionError(
                f"seed adjoint shape {seed.shape} does not match output {self.data.shape}"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        adjoints: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = pg if key not in adjoints else adjoints[key] + pg

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of a differentiable primitive."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return make_op(out, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g / (2.0 * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    z = np.exp(-np.abs(x.data))
    slope = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make_op(out, (x,), lambda g: (g * slope,))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ------------------------------------------------------------------ reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ------------------------------------------------------------------ structural
def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice) indexing."""

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_op(a.data[index].copy(), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: np.split(g, splits, axis=axis),
    )


# ----------------------------------------------------------------- convolution
def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != ic:
        raise DimensionError(f"input has {c} channels, kernel expects {ic}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: list[Tensor] = [x, kernel]
    if bias is not None:
        if bias.shape != (oc,):
            raise DimensionError(f"bias shape {bias.shape} does not match {oc} output channels")
        out = out + bias.data.reshape(1, oc, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # N,ho,wo,C,kh,kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_op(out, parents, vjp)


# ------------------------------------------------------------------ batch norm
class BatchNormParams:
    """Per-channel scale/shift plus running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, params: BatchNormParams, mode: str = "train", enabled: bool = True) -> Tensor:
    if not enabled:
        return x
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch norm mode {mode!r}")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    gamma = params.weight.data.reshape(shape)
    beta = params.bias.data.reshape(shape)

    if mode == "eval":
        if not params.initialized:
            raise UninitializedStatisticsError("batch norm evaluated before any train-mode pass")
        inv = 1.0 / np.sqrt(params.running_var.reshape(shape) + params.eps)
        xhat = (x.data - params.running_mean.reshape(shape)) * inv

        def vjp_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_op(gamma * xhat + beta, (x, params.weight, params.bias), vjp_eval)

    m = x.data.size // c
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x.data - mu) * inv

    mom = params.momentum
    unbiased = var.ravel() * (m / max(m - 1, 1))
    if params.initialized:
        params.running_mean = (1 - mom) * params.running_mean + mom * mu.ravel()
        params.running_var = (1 - mom) * params.running_var + mom * unbiased
    else:
        params.running_mean = mu.ravel().copy()
        params.running_var = unbiased.copy()
        params.initialized = True

    def vjp_train(g):
        gxhat = g * gamma
        gx = inv * (
            gxhat
            - gxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op(gamma * xhat + beta, (x, params.weight, params.bias), vjp_train)


# ---------------------------------------------------------------------- resize
def _interp_matrix(n_in: int, scale: int, kind: str) -> np.ndarray:
    n_out = n_in * scale
    mat = np.zeros((n_out, n_in))
    dst = np.arange(n_out)
    if kind == "nearest":
        mat[dst, dst // scale] = 1.0
    elif kind == "bilinear":
        src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(mat, (dst, lo), 1.0 - frac)
        np.add.at(mat, (dst, hi), frac)
    else:
        raise ValueError(f"unknown resize kind {kind!r}")
    return mat


def _separable(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    out = np.einsum("ih,nchw,jw->ncij", rows, x.data, cols, optimize=True)
    return make_op(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", rows, g, cols, optimize=True),))


def resize(x: Tensor, scale: int, kind: str = "bilinear") -> Tensor:
    """Integer upscaling; bilinear uses the half-pixel (align-corners off) convention."""
    if scale < 1 or int(scale) != scale:
        raise ValueError("scale must be a positive integer")
    if scale == 1:
        return x
    _, _, h, w = x.shape
    return _separable(x, _interp_matrix(h, scale, kind), _interp_matrix(w, scale, kind))


def avg_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window averaging (area downsampling)."""
    _, _, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial size {h}x{w} not divisible by {window}")
    rows = np.kron(np.eye(h // window), np.full((1, window), 1.0 / window))
    cols = np.kron(np.eye(w // window), np.full((1, window), 1.0 / window))
    return _separable(x, rows, cols)


# ---------------------------------------------------------------- serialization
MAGIC = b"NCT1"


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    """Write one tensor: magic, four little-endian uint32 dims, float64 payload."""
    array = np.asarray(array, dtype=DTYPE)
    if array.ndim > 4:
        raise DimensionError("at most 4 dimensions are serializable")
    dims = (1,) * (4 - array.ndim) + array.shape
    fh.write(MAGIC)
    fh.write(struct.pack("<4I", *dims))
    fh.write(np.ascontiguousarray(array).astype("<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    header = fh.read(16)
    if len(header) != 16:
        raise OSError("truncated tensor header")
    dims = struct.unpack("<4I", header)
    count = int(np.prod(dims))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise OSError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims)
