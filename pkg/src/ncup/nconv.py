"""Normalized convolution, confidence propagation and confidence-aware pooling."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, concat, conv2d, make_op, resize, softplus

#: Guard added to the confidence response where it vanishes exactly.
EPS = 1e-8


class NConvKernel:
    """Positive interpolation kernel, stored as raw parameters behind a softplus."""

    def __init__(self, raw):
        raw = raw if isinstance(raw, Tensor) else Tensor(raw, requires_grad=True)
        if raw.ndim != 4:
            raise DimensionError("kernel raw parameters must be (outC, inC, kH, kW)")
        self.raw = raw

    @classmethod
    def uniform(cls, size: int, in_channels: int = 1, out_channels: int = 1, value: float = 0.0):
        return cls(np.full((out_channels, in_channels, size, size), value))

    @property
    def size(self) -> int:
        return self.raw.shape[-1]

    @property
    def num_params(self) -> int:
        return self.raw.data.size

    def effective(self) -> Tensor:
        return softplus(self.raw)


def nconv_forward(data: Tensor, conf: Tensor, kernel: NConvKernel, pad: int | None = None):
    """One normalized convolution layer.

    Returns ``(data_out, conf_out)`` where ``data_out`` is the confidence-weighted
    average of ``data`` under the kernel and ``conf_out`` is the kernel-normalized
    confidence response.  Padding carries zero confidence, so the border never
    contributes data.
    """
    if data.shape != conf.shape:
        raise DimensionError(f"data {data.shape} and confidence {conf.shape} differ")
    a = kernel.effective()
    assert np.all(a.data > 0), "normalized convolution kernel must be strictly positive"
    if pad is None:
        pad = (kernel.size - 1) // 2

    num = conv2d(data * conf, a, pad=pad)
    den = conv2d(conf, a, pad=pad)
    guard = np.where(den.data == 0.0, EPS, 0.0)
    data_out = num / (den + guard)
    conf_out = den / a.sum(axis=(1, 2, 3)).reshape(1, -1, 1, 1)
    return data_out, conf_out


def nconv_fuse(data_a: Tensor, conf_a: Tensor, data_b: Tensor, conf_b: Tensor, kernel: NConvKernel):
    """Merge two confidence-tagged streams with one two-input-channel layer."""
    if not (data_a.shape == conf_a.shape == data_b.shape == conf_b.shape):
        raise DimensionError("fused streams must share one shape")
    if kernel.raw.shape[1] != 2 * data_a.shape[1]:
        raise DimensionError("fusion kernel must take both streams as input channels")
    return nconv_forward(concat([data_a, data_b]), concat([conf_a, conf_b]), kernel)


def _cells(x: np.ndarray, window: int) -> np.ndarray:
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // window, window, w // window, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // window, w // window, window * window)
    )


def _gather_cells(x: Tensor, idx: np.ndarray, window: int) -> Tensor:
    """Pick one entry per window cell at flat in-cell offset ``idx``."""
    cells = _cells(x.data, window)
    out = np.take_along_axis(cells, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        n, c, hc, wc = g.shape
        full = np.zeros((n, c, hc, wc, window * window))
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        full = full.reshape(n, c, hc, wc, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (full.reshape(x.shape),)

    return make_op(out, (x,), vjp)


def conf_pool(data: Tensor, conf: Tensor, window: int = 2, mode: str = "conf"):
    """Downsample by ``window``.

    ``mode="conf"`` carries, per cell, the data and confidence at the most
    confident location (first in row-major order on ties).  ``mode="max"`` takes
    the maxima of data and confidence independently.
    """
    if data.shape != conf.shape:
        raise DimensionError(f"data {data.shape} and confidence {conf.shape} differ")
    _, _, h, w = data.shape
    if h % window or w % window:
        raise DimensionError(f"spatial size {h}x{w} not divisible by pooling window {window}")
    conf_idx = np.argmax(_cells(conf.data, window), axis=-1)
    if mode == "conf":
        data_idx = conf_idx
    elif mode == "max":
        data_idx = np.argmax(_cells(data.data, window), axis=-1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _gather_cells(data, data_idx, window), _gather_cells(conf, conf_idx, window)


def conf_unpool(data: Tensor, conf: Tensor, scale: int = 2):
    if scale < 2:
        raise ValueError("unpooling scale must be >= 2")
    return resize(data, scale, "nearest"), resize(conf, scale, "nearest")
