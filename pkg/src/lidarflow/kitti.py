"""KITTI odometry ingestion: Velodyne scans -> cached range images -> triplets.

Layout: ``<root>/sequences/<SS>/velodyne/<FFFFFF>.bin``.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, FormatError
from .projection import (
    DEFAULT_PROJECTION,
    ProjectionConfig,
    RangeImage,
    project_cloud,
    read_rimg,
    write_rimg,
)

log = logging.getLogger(__name__)

ALL_SEQUENCES = tuple(f"{i:02d}" for i in range(22))


def load_velodyne_bin(path) -> np.ndarray:
    """Read an (N, 4) float32 array of x, y, z, intensity.

    Records with NaN/Inf are dropped with a warning giving their count.
    """
    blob = Path(path).read_bytes()
    if len(blob) % 16:
        raise FormatError(f"{path}: size {len(blob)} is not a multiple of 16 bytes")
    pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float32)
    finite = np.isfinite(pts).all(axis=1)
    bad = int((~finite).sum())
    if bad:
        log.warning("%s: skipped %d non-finite point(s)", path, bad)
        pts = pts[finite]
    return pts


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...] = tuple(f"{i:02d}" for i in range(16))
    val: Tuple[str, ...] = ("16", "17", "18")
    test: Tuple[str, ...] = ("19", "20", "21")

    def __post_init__(self):
        seen = set()
        for name in ("train", "val", "test"):
            ids = getattr(self, name)
            overlap = seen.intersection(ids)
            if overlap:
                raise DataError(f"split {name!r} overlaps other splits on {sorted(overlap)}")
            seen.update(ids)

    def covers_all(self) -> bool:
        return set(self.train) | set(self.val) | set(self.test) == set(ALL_SEQUENCES)

    @classmethod
    def parse(cls, text: str) -> "DatasetSplit":
        """``"00-15/16-18/19-21"`` or comma lists, ``train/val/test``."""
        parts = text.split("/")
        if len(parts) != 3:
            raise DataError(f"split must have the form train/val/test, got {text!r}")
        return cls(*(tuple(_expand_ids(p)) for p in parts))


def _expand_ids(text: str) -> List[str]:
    ids = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        if "-" in tok:
            lo, hi = tok.split("-")
            ids.extend(f"{i:02d}" for i in range(int(lo), int(hi) + 1))
        else:
            ids.append(f"{int(tok):02d}")
    return ids


class Triplet(NamedTuple):
    sequence: str
    frames: Tuple[Path, Path, Path]
    index: int  # frame number of the first member


def sequence_frames(root, sequence: str) -> List[Path]:
    return sorted((Path(root) / "sequences" / sequence / "velodyne").glob("*.bin"))


def triplets_for_sequence(sequence: str, frames: Sequence[Path]) -> List[Triplet]:
    """Non-overlapping consecutive triplets; a remainder of 1-2 frames is dropped."""
    if len(frames) < 3:
        log.warning("sequence %s has %d frame(s); fewer than 3, excluded", sequence, len(frames))
        return []
    out = []
    for start in range(0, len(frames) - 2, 3):
        out.append(Triplet(sequence, tuple(frames[start:start + 3]), start))
    return out


def build_triplets(sequence_dirs: Dict[str, Sequence[Path]], split: DatasetSplit = DatasetSplit()):
    """Return ``(train, val, test)`` lists of triplets, ordered by sequence then frame."""
    groups = {"train": [], "val": [], "test": []}
    for name in groups:
        for seq in getattr(split, name):
            if seq in sequence_dirs:
                groups[name].extend(triplets_for_sequence(seq, sequence_dirs[seq]))
    return groups["train"], groups["val"], groups["test"]


def discover(root, split: DatasetSplit = DatasetSplit()):
    """Scan ``root`` and build triplets for every sequence directory present."""
    dirs = {}
    for seq in set(split.train) | set(split.val) | set(split.test):
        frames = sequence_frames(root, seq)
        if frames:
            dirs[seq] = frames
    return build_triplets(dirs, split)


def default_cache_dir() -> Path:
    env = os.environ.get("LIDARFLOW_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "lidarflow"


class FrameCache:
    """Projects scans on demand and keeps RIMG copies keyed by projection config."""

    def __init__(self, config: ProjectionConfig = DEFAULT_PROJECTION, cache_dir=None):
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()

    def path_for(self, scan: Path) -> Path:
        scan = Path(scan)
        seq = scan.parent.parent.name
        return self.cache_dir / self.config.key() / seq / (scan.stem + ".rimg")

    def range_image(self, scan) -> RangeImage:
        cached = self.path_for(scan)
        if cached.exists():
            return read_rimg(cached)
        img = project_cloud(load_velodyne_bin(scan), self.config)
        if img.occupied_fraction() == 0:
            raise DataError(f"{scan}: projection is empty; is this a Velodyne scan?")
        cached.parent.mkdir(parents=True, exist_ok=True)
        write_rimg(cached, img)
        return img


class PairDataset:
    """Training pairs (frame i, frame i+1) of a list of triplets.

    Items are ``(I1, I2)`` arrays of shape (1, H, W) with normalized ranges,
    zero-padded so H and W are divisible by 64.
    """

    def __init__(self, triplets: Sequence[Triplet], cache: FrameCache):
        self.triplets = list(triplets)
        self.cache = cache

    def __len__(self) -> int:
        return len(self.triplets)

    def _load(self, scan) -> np.ndarray:
        from .model import pad_to_multiple

        img = self.cache.range_image(scan)
        scaled = np.clip(img.ranges / np.float32(self.cache.config.max_range), 0.0, 1.0)
        return pad_to_multiple(scaled[None].astype(np.float32))

    def __getitem__(self, item):
        if isinstance(item, slice):
            return [self[i] for i in range(*item.indices(len(self)))]
        t = self.triplets[item]
        return self._load(t.frames[0]), self._load(t.frames[1])

    def raw_pair(self, item) -> Tuple[RangeImage, RangeImage]:
        t = self.triplets[item]
        return self.cache.range_image(t.frames[0]), self.cache.range_image(t.frames[1])
