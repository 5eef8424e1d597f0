"""Synthetic range-image pairs with a known uniform displacement."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def smooth_texture(rng: np.random.Generator, height: int, width: int, sigmas=(1.5, 4.0, 10.0)) -> np.ndarray:
    """Multi-scale smooth random field rescaled to normalized ranges in [0.1, 0.9]."""
    field = np.zeros((height, width))
    for s in sigmas:
        layer = ndimage.gaussian_filter(rng.standard_normal((height, width)), s, mode="wrap")
        field += layer / (layer.std() + 1e-12)
    lo, hi = field.min(), field.max()
    return 0.1 + 0.8 * (field - lo) / (hi - lo)


def shifted_pair(
    rng: np.random.Generator,
    height: int = 64,
    width: int = 256,
    shift: int = 1,
    dropout: float = 0.0,
    margin: int = 8,
):
    """Return (I1, I2) with I1(x, y) == I2(x + shift, y) everywhere they overlap.

    The scene leaves ``margin`` empty columns on each side, so the shifted
    frame is reconstructable without sampling outside the image. ``dropout``
    is the fraction of scene pixels with no return (0); empty pixels move
    with the scene.
    """
    base = smooth_texture(rng, height, width + shift)
    if margin > 0:
        base[:, :margin] = 0.0
        base[:, -margin:] = 0.0
    if dropout > 0:
        base[rng.random(base.shape) < dropout] = 0.0
    i1 = base[:, shift:shift + width]
    i2 = base[:, :width]
    return i1[None].astype(np.float32), i2[None].astype(np.float32)


def shift_dataset(n_pairs: int = 8, height: int = 64, width: int = 256, shift: int = 1, seed: int = 0,
                  dropout: float = 0.0, margin: int = 8) -> list:
    rng = np.random.default_rng(seed)
    return [shifted_pair(rng, height, width, shift, dropout, margin) for _ in range(n_pairs)]
