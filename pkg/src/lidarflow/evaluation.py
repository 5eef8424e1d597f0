"""Inference and the L1 reconstruction metric.

The metric back-warps frame 2 with the full-resolution flow and averages
``|I_r - I_1|`` in meters over pixels where frame 1 has a return. The same
pixels are scored for the zero-flow baseline (frame 2 taken as is).
"""

from __future__ import annotations

import dataclasses
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import DataError, ShapeError
from .model import DEFAULT_CONFIG, ModelConfig, model_forward, pad_to_multiple
from .optim import ParameterStore
from .projection import DEFAULT_PROJECTION, ProjectionConfig, RangeImage
from .tensor import Tensor, no_grad


@dataclasses.dataclass
class EvalReport:
    per_frame_l1: List[float]
    baseline_per_frame_l1: List[float]
    param_count: int

    @property
    def frame_count(self) -> int:
        return len(self.per_frame_l1)

    @property
    def mean_l1(self) -> float:
        return float(np.mean(self.per_frame_l1))

    @property
    def baseline_mean_l1(self) -> float:
        return float(np.mean(self.baseline_per_frame_l1))

    def to_dict(self) -> dict:
        return {
            "frame_count": self.frame_count,
            "mean_l1_m": self.mean_l1,
            "identity_baseline_mean_l1_m": self.baseline_mean_l1,
            "param_count": self.param_count,
            "per_frame_l1_m": self.per_frame_l1,
            "baseline_per_frame_l1_m": self.baseline_per_frame_l1,
        }


def _to_input(img: RangeImage, config: ProjectionConfig) -> np.ndarray:
    scaled = np.clip(img.ranges / np.float32(config.max_range), 0.0, 1.0)
    return pad_to_multiple(scaled[None, None].astype(np.float32))


def infer(
    params: ParameterStore,
    frame1: RangeImage,
    frame2: RangeImage,
    projection: ProjectionConfig = DEFAULT_PROJECTION,
    model_config: ModelConfig = DEFAULT_CONFIG,
) -> np.ndarray:
    """Level-1 flow I1 -> I2 as a (1, 2, h, w) array cropped to the frame extents."""
    if frame1.shape != frame2.shape:
        raise ShapeError("infer", "frame2", frame1.shape, frame2.shape)
    h, w = frame1.shape
    with no_grad():
        flows = model_forward(Tensor(_to_input(frame1, projection)), Tensor(_to_input(frame2, projection)),
                              params, model_config)
    return flows[1].data[:, :, :h, :w].copy()


def l1_reconstruction(frame1: RangeImage, frame2: RangeImage, flow: np.ndarray) -> Tuple[float, float]:
    """(model L1, zero-flow L1) in meters over frame-1 occupied pixels."""
    i1 = frame1.ranges.astype(np.float64)[None, None]
    i2 = frame2.ranges.astype(np.float64)[None, None]
    occ = frame1.occupancy
    if not occ.any():
        raise DataError("reference frame has no returns; L1 is undefined")
    recon = ops.backwarp(Tensor(i2), Tensor(np.asarray(flow, dtype=np.float64))).data[0, 0]
    model_l1 = float(np.abs(recon - i1[0, 0])[occ].mean())
    base_l1 = float(np.abs(i2[0, 0] - i1[0, 0])[occ].mean())
    return model_l1, base_l1


def eval_l1(
    params: ParameterStore,
    pairs: Sequence[Tuple[RangeImage, RangeImage]],
    projection: ProjectionConfig = DEFAULT_PROJECTION,
    model_config: ModelConfig = DEFAULT_CONFIG,
    flow_fn: Optional[Callable] = None,
) -> EvalReport:
    """Score every pair; ``flow_fn(frame1, frame2)`` overrides the model."""
    if len(pairs) == 0:
        raise DataError("test set is empty")
    if flow_fn is None:
        flow_fn = lambda a, b: infer(params, a, b, projection, model_config)  # noqa: E731
    model_scores, base_scores = [], []
    for frame1, frame2 in pairs:
        m, b = l1_reconstruction(frame1, frame2, flow_fn(frame1, frame2))
        model_scores.append(m)
        base_scores.append(b)
    return EvalReport(model_scores, base_scores, params.num_scalars() if params is not None else 0)
