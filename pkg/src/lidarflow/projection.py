"""Spherical projection of LiDAR point clouds into range images.

A point ``(x, y, z)`` at range ``rho`` lands on column
``0.5 * (1 - atan2(y, x) / pi) * w`` and row
``(1 - (asin(z / rho) + |fov_down|) / fov) * h`` with angles in radians and
``fov = |fov_down| + |fov_up|``; both are floored and clamped to the image.
Where several points share a pixel the nearest one is kept.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError
from .tensor import Tensor

RIMG_MAGIC = b"RIMG"
# pitch tolerance (radians) so points exactly on the FOV boundary survive round-off
_FOV_EPS = 1e-9


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclasses.dataclass(frozen=True)
class ProjectionConfig:
    width: int = 1024
    height: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    max_range: float = 85.0

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("width and height must be at least 2")
        if not self.fov > 0:
            raise ValueError("vertical field of view must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    @property
    def fov(self) -> float:
        return abs(self.fov_down) + abs(self.fov_up)

    def key(self) -> str:
        return f"{self.width}x{self.height}_up{self.fov_up:g}_down{self.fov_down:g}_r{self.max_range:g}"


DEFAULT_PROJECTION = ProjectionConfig()


@dataclasses.dataclass
class RangeImage:
    ranges: np.ndarray  # (h, w) float32 meters, 0 = no return

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float32)
        if self.ranges.ndim != 2:
            raise ValueError("ranges must be a 2-D grid")

    @property
    def occupancy(self) -> np.ndarray:
        return self.ranges > 0

    @property
    def shape(self) -> tuple:
        return self.ranges.shape

    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())


def _as_xyz(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    arr = np.atleast_2d(arr)
    if arr.shape[1] < 3:
        raise ValueError("points need at least x, y, z columns")
    return arr[:, :3]


def pixel_coordinates(points, config: ProjectionConfig = DEFAULT_PROJECTION):
    """Return (u, v, rho, keep) for every point; ``keep`` marks projectable ones."""
    xyz = _as_xyz(points)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rho = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore", divide="ignore"):
        pitch = np.arcsin(np.clip(z / rho, -1.0, 1.0))
    yaw = np.arctan2(y, x)
    up = np.radians(config.fov_up)
    down = np.radians(config.fov_down)
    fov = np.radians(config.fov)
    keep = (
        np.isfinite(rho)
        & (rho > 0)
        & (rho <= config.max_range)
        & (pitch <= up + _FOV_EPS)
        & (pitch >= down - _FOV_EPS)
    )
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * config.width)
    v = np.floor((1.0 - (pitch + abs(down)) / fov) * config.height)
    u = np.clip(np.nan_to_num(u), 0, config.width - 1).astype(np.int64)
    v = np.clip(np.nan_to_num(v), 0, config.height - 1).astype(np.int64)
    return u, v, rho, keep


def project_cloud(points, config: ProjectionConfig = DEFAULT_PROJECTION) -> RangeImage:
    """Project a cloud (sequence of :class:`Point` or an (N, >=3) array)."""
    u, v, rho, keep = pixel_coordinates(points, config)
    flat = np.full(config.height * config.width, np.inf)
    np.minimum.at(flat, v[keep] * config.width + u[keep], rho[keep])
    flat[np.isinf(flat)] = 0.0
    return RangeImage(flat.reshape(config.height, config.width))


def normalize(image: RangeImage, config: ProjectionConfig = DEFAULT_PROJECTION) -> Tensor:
    """(1, 1, h, w) tensor of ranges / max_range."""
    scaled = np.clip(image.ranges / np.float32(config.max_range), 0.0, 1.0)
    return Tensor(scaled[None, None])


def write_rimg(path, image: RangeImage) -> None:
    h, w = image.shape
    payload = np.ascontiguousarray(image.ranges, dtype="<f4").tobytes()
    Path(path).write_bytes(RIMG_MAGIC + struct.pack("<II", h, w) + payload)


def read_rimg(path) -> RangeImage:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != RIMG_MAGIC:
        raise FormatError(f"{path}: not a RIMG file (bad magic)")
    h, w = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * h * w:
        raise FormatError(f"{path}: expected {12 + 4 * h * w} bytes for a {h}x{w} image, found {len(blob)}")
    ranges = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w)
    return RangeImage(ranges.copy())
