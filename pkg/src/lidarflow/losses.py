"""Photometric reconstruction losses on range-image pyramids.

Per level the residual between the reference image and the back-warped
target is reduced to a root-mean-square value (``norm="rms"``) or a plain
Euclidean norm (``norm="l2"``), then the levels are combined with the
``alpha`` weights. The fine-tuning variant restricts the residual to pixels
where the reference image has a return and adds a weight-norm penalty.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .optim import ParameterStore
from .tensor import Tensor, add, mul, scale, sqrt, square, sum_all

ALL_LEVELS = tuple(range(1, 8))


@dataclasses.dataclass(frozen=True)
class LossWeights:
    alpha: Tuple[float, ...] = (0.3, 0.06, 0.08, 0.1, 0.12, 0.14, 0.2)
    gamma: float = 1e-6
    norm: str = "rms"
    # "gated": residual * mask; "literal": (warped * mask) - reference
    mask_mode: str = "gated"

    def __post_init__(self):
        if len(self.alpha) != 7 or any(a <= 0 for a in self.alpha):
            raise ValueError("alpha needs 7 positive weights")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.norm not in ("rms", "l2"):
            raise ValueError("norm must be 'rms' or 'l2'")
        if self.mask_mode not in ("gated", "literal"):
            raise ValueError("mask_mode must be 'gated' or 'literal'")


DEFAULT_WEIGHTS = LossWeights()


def image_pyramid(image: Tensor) -> Dict[int, Tensor]:
    """Level 1 is the image; each further level is a 2x2 average of the previous."""
    _, _, h, w = image.shape
    if h % 64 or w % 64:
        raise ShapeError("image_pyramid", "image", "height and width divisible by 64", image.shape)
    levels = {1: image}
    for l in ALL_LEVELS[1:]:
        levels[l] = ops.avg_pool2x(levels[l - 1])
    return levels


def existence_mask(reference: Tensor) -> Tensor:
    """1 where the (possibly downsampled) reference range is positive."""
    return Tensor((reference.data > 0).astype(reference.dtype))


def reconstruct(target: Tensor, flow: Tensor) -> Tensor:
    if target.shape[2:] != flow.shape[2:] or target.shape[0] != flow.shape[0]:
        raise ShapeError("reconstruct", "flow", (target.shape[0], 2) + target.shape[2:], flow.shape)
    return ops.backwarp(target, flow)


def _norm(residual: Tensor, norm: str, count: Optional[float] = None) -> Tensor:
    sq = sum_all(square(residual))
    if norm == "rms":
        n = residual.data.size if count is None else count
        sq = scale(sq, 1.0 / n)
    return sqrt(sq)


def _check_levels(flows: Mapping[int, Tensor]) -> None:
    missing = [l for l in ALL_LEVELS if l not in flows]
    if missing:
        raise ShapeError("loss", "flows", f"flow fields for levels {list(ALL_LEVELS)}", tuple(sorted(flows)))


def training_loss(
    flows: Mapping[int, Tensor], i1: Tensor, i2: Tensor, weights: LossWeights = DEFAULT_WEIGHTS
) -> Tensor:
    _check_levels(flows)
    p1 = image_pyramid(i1)
    p2 = image_pyramid(i2)
    total = None
    for l, alpha in zip(ALL_LEVELS, weights.alpha):
        term = scale(_norm(reconstruct(p2[l], flows[l]) - p1[l], weights.norm), alpha)
        total = term if total is None else add(total, term)
    return total


def weight_norm(params: ParameterStore) -> Tensor:
    """Euclidean norm over every learnable scalar."""
    total = None
    for p in params.values():
        s = sum_all(square(p))
        total = s if total is None else add(total, s)
    if total is None:
        return Tensor(0.0)
    return sqrt(total)


def finetune_loss(
    flows: Mapping[int, Tensor],
    i1: Tensor,
    i2: Tensor,
    weights: LossWeights = DEFAULT_WEIGHTS,
    params: Optional[ParameterStore] = None,
) -> Tensor:
    """Masked multi-level reconstruction loss plus ``gamma * ||theta||``.

    In ``gated`` mode the residual is averaged over active mask pixels only;
    a level whose mask is empty contributes 0.
    """
    _check_levels(flows)
    p1 = image_pyramid(i1)
    p2 = image_pyramid(i2)
    total = Tensor(0.0)
    for l, alpha in zip(ALL_LEVELS, weights.alpha):
        mask = existence_mask(p1[l])
        warped = reconstruct(p2[l], flows[l])
        if weights.mask_mode == "gated":
            active = float(mask.data.sum())
            if active == 0:
                continue
            term = _norm(mul(warped - p1[l], mask), weights.norm, count=active)
        else:
            term = _norm(mul(warped, mask) - p1[l], weights.norm)
        total = add(total, scale(term, alpha))
    if params is not None and weights.gamma > 0:
        total = add(total, scale(weight_norm(params), weights.gamma))
    return total
