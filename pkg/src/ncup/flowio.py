"""Flow file I/O, end-point error and image dumps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    """Raised when a file is not a valid ``.flo`` or PPM file."""


def _as_hw2(flow) -> np.ndarray:
    flow = np.asarray(getattr(flow, "data", flow), dtype=np.float64)
    if flow.ndim == 4:
        if flow.shape[0] != 1 or flow.shape[1] != 2:
            raise ValueError(f"expected a single (1, 2, H, W) flow, got {flow.shape}")
        return flow[0].transpose(1, 2, 0)
    if flow.ndim == 3 and flow.shape[0] == 2 and flow.shape[2] != 2:
        return flow.transpose(1, 2, 0)
    if flow.ndim == 3 and flow.shape[2] == 2:
        return flow
    raise ValueError(f"cannot interpret shape {flow.shape} as a flow field")


def write_flo(path, flow) -> None:
    """Write a Middlebury ``.flo`` file.  Values are stored as float32."""
    hw2 = _as_hw2(flow)
    h, w, _ = hw2.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(hw2.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a ``.flo`` file as a float64 array of shape (1, 2, H, W)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise OSError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {raw[:4]!r}")
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid size {w}x{h}")
    count = 2 * w * h
    if len(raw) < 12 + 4 * count:
        raise OSError(f"{path}: truncated payload ({len(raw) - 12} of {4 * count} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=12).astype(np.float64)
    return data.reshape(h, w, 2).transpose(2, 0, 1)[None].copy()


def epe(pred, gt) -> float:
    """Mean end-point error between two flows of identical shape (..., 2, H, W)."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)))


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """Color-wheel rendering: hue from direction, saturation from magnitude, white at rest."""
    hw2 = _as_hw2(flow)
    u, v = hw2[..., 0], hw2[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    sat = np.clip(mag / max_magnitude, 0.0, 1.0) if max_magnitude > 0 else np.zeros_like(mag)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(mag)], axis=-1))
    return np.round(rgb * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6).  A 2-D array is written as gray on all three channels."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as uint8 (H, W, 3)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FlowFormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FlowFormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FlowFormatError(f"{path}: only 8-bit PPM is supported")
    pos += 1
    payload = raw[pos : pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise OSError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def weights_to_gray(conf) -> np.ndarray:
    conf = np.asarray(getattr(conf, "data", conf), dtype=np.float64)
    return np.round(255.0 * np.clip(conf, 0.0, 1.0)).astype(np.uint8)


def dump_weights_map(conf, path) -> np.ndarray:
    """Write a confidence map as an 8-bit gray image; returns the pixel array."""
    gray = weights_to_gray(np.squeeze(np.asarray(getattr(conf, "data", conf))))
    if gray.ndim != 2:
        raise ValueError("dump_weights_map expects a single-channel map")
    write_ppm(path, gray)
    return gray
