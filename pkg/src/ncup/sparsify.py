"""Forward mapping of a low-resolution grid onto a sparse high-resolution grid."""

from __future__ import annotations

from dataclasses import dataclass
from numbers import Integral, Real

import numpy as np

from .tensor import DimensionError, Tensor, make_op


class UnsupportedScaleError(ValueError):
    """Raised for scale factors that do not produce a regular grid."""


@dataclass
class SparseGrid:
    data: Tensor
    conf: Tensor
    populated: int  # populated pixels per channel


def _check_scale(s) -> int:
    if isinstance(s, bool) or not isinstance(s, Real):
        raise UnsupportedScaleError(f"scale must be a positive integer, got {s!r}")
    if not isinstance(s, Integral) and not float(s).is_integer():
        raise UnsupportedScaleError(f"non-integer scale {s} is not supported")
    s = int(s)
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    return s


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def mapped_coords(n: int, s: int) -> np.ndarray:
    """Destination indices of source positions ``0..n-1`` along one axis."""
    dst = _round_half_away(s * np.arange(n, dtype=float)).astype(int)
    return np.clip(dst, 0, s * n - 1)


def _scatter(x: Tensor, rows: np.ndarray, cols: np.ndarray, out_hw: tuple[int, int]) -> Tensor:
    n, c = x.shape[:2]
    out = np.zeros((n, c) + out_hw)
    out[:, :, rows[:, None], cols[None, :]] = x.data
    return make_op(out, (x,), lambda g: (g[:, :, rows[:, None], cols[None, :]],))


def forward_map(lowres: Tensor, weights_lr: Tensor, s) -> SparseGrid:
    """Place every low-resolution pixel (x', y') at (round(s x'), round(s y')).

    Unpopulated pixels hold data 0 and confidence 0.  Data and weights are
    scattered with the same map, so their sparsity patterns coincide.
    """
    s = _check_scale(s)
    if lowres.shape != weights_lr.shape:
        raise DimensionError(f"data {lowres.shape} and weights {weights_lr.shape} differ")
    _, _, h, w = lowres.shape
    rows, cols = mapped_coords(h, s), mapped_coords(w, s)
    assert len(np.unique(rows)) == h and len(np.unique(cols)) == w, "forward map is not injective"
    out_hw = (s * h, s * w)
    return SparseGrid(
        data=_scatter(lowres, rows, cols, out_hw),
        conf=_scatter(weights_lr, rows, cols, out_hw),
        populated=h * w,
    )


def read_back(grid: SparseGrid | Tensor, s, which: str = "data") -> Tensor:
    """Gather the populated pixels of a forward-mapped grid."""
    s = _check_scale(s)
    if isinstance(grid, SparseGrid):
        x = grid.data if which == "data" else grid.conf
    else:
        x = grid
    _, _, hh, ww = x.shape
    if hh % s or ww % s:
        raise DimensionError(f"grid {hh}x{ww} is inconsistent with scale {s}")
    rows, cols = mapped_coords(hh // s, s), mapped_coords(ww // s, s)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, :, rows[:, None], cols[None, :]] = g
        return (full,)

    return make_op(x.data[:, :, rows[:, None], cols[None, :]], (x,), vjp)


def populated_mask(shape_lr: tuple[int, int], s: int) -> np.ndarray:
    h, w = shape_lr
    mask = np.zeros((s * h, s * w), dtype=bool)
    mask[mapped_coords(h, s)[:, None], mapped_coords(w, s)[None, :]] = True
    return mask


__all__ = [
    "SparseGrid",
    "UnsupportedScaleError",
    "forward_map",
    "read_back",
    "mapped_coords",
    "populated_mask",
]
