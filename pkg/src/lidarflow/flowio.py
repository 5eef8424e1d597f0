"""Middlebury ``.flo`` files and portable-pixmap rendering."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

FLO_MAGIC = 202021.25
_FLO_MAGIC_BYTES = struct.pack("<f", FLO_MAGIC)


def flow_to_hw2(flow) -> np.ndarray:
    """Accept (H, W, 2), (2, H, W) or (1, 2, H, W) and return (H, W, 2)."""
    arr = np.asarray(getattr(flow, "data", flow))
    if arr.ndim == 4:
        if arr.shape[:2] != (1, 2):
            raise ValueError(f"expected a (1, 2, H, W) flow, got {arr.shape}")
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] == 2 and arr.shape[-1] != 2:
        arr = arr.transpose(1, 2, 0)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise ValueError(f"cannot interpret flow of shape {arr.shape}")
    return arr


def write_flo(path, flow) -> None:
    uv = np.ascontiguousarray(flow_to_hw2(flow), dtype="<f4")
    h, w = uv.shape[:2]
    Path(path).write_bytes(_FLO_MAGIC_BYTES + struct.pack("<ii", w, h) + uv.tobytes())


def read_flo(path) -> np.ndarray:
    """Return an (H, W, 2) float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != _FLO_MAGIC_BYTES:
        raise FormatError(f"{path}: wrong magic number, not a .flo file")
    w, h = struct.unpack_from("<ii", blob, 4)
    if w < 0 or h < 0 or len(blob) != 12 + 8 * w * h:
        raise FormatError(f"{path}: size does not match the {w}x{h} header")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 2).copy()


def _write_pnm(path, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    kind = "P5" if pixels.ndim == 2 else "P6"
    header = f"{kind}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def range_to_gray(ranges: np.ndarray, max_range: float) -> np.ndarray:
    scaled = np.clip(np.asarray(ranges, dtype=np.float64) / max_range, 0.0, 1.0)
    return np.round(scaled * 255).astype(np.uint8)


def flow_to_rgb(flow, max_magnitude=None) -> np.ndarray:
    """HSV wheel: hue = direction, saturation = magnitude, value = 1.

    Zero flow is white; ``max_magnitude`` defaults to the largest magnitude.
    """
    uv = flow_to_hw2(flow).astype(np.float64)
    mag = np.hypot(uv[..., 0], uv[..., 1])
    top = max_magnitude if max_magnitude else (mag.max() if mag.max() > 0 else 1.0)
    hue = (np.arctan2(-uv[..., 1], -uv[..., 0]) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / top, 0.0, 1.0)
    # HSV -> RGB with V = 1
    k = lambda n: (n + hue * 6.0) % 6.0  # noqa: E731
    channels = [1.0 - sat * np.clip(np.minimum(k(n), 4.0 - k(n)), 0.0, 1.0) for n in (5.0, 3.0, 1.0)]
    rgb = np.stack(channels, axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def render_range(path, ranges: np.ndarray, max_range: float) -> None:
    """8-bit grayscale PGM, linear in range / max_range."""
    _write_pnm(path, range_to_gray(ranges, max_range))


def render_flow(path, flow, max_magnitude=None) -> None:
    """Colour-wheel PPM of a flow field."""
    _write_pnm(path, flow_to_rgb(flow, max_magnitude))
