"""Fast consistency checks behind ``lidarflow selftest`` and ``gradcheck --model``."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import gradcheck, kernels, losses, ops
from .kernels import _numpy as numpy_kernels
from .model import DEFAULT_CONFIG, ModelConfig, init_params, model_forward
from .projection import ProjectionConfig, project_cloud
from .synthetic import shifted_pair
from .tensor import Tensor, oracle_precision
from .training import Checkpoint


def generic_point(params, rng: np.random.Generator, bias_scale: float = 0.05) -> None:
    """Move ``params`` off the kinks a fresh initialisation sits on (in place).

    Zero biases put every pre-activation over an empty input region exactly
    at the leaky-ReLU kink, and near-zero flows put every warp sample exactly
    on integer pixels where bilinear interpolation has a kink. Random biases
    and a fractional flow offset make the loss differentiable at the point.
    """
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(-bias_scale, bias_scale, p.data.shape)
    offset = rng.uniform(0.2, 0.4, 2) * rng.choice([-1.0, 1.0], 2)
    params["estimator.conv6.bias"].data[...] = offset.reshape(params["estimator.conv6.bias"].data.shape)


def end_to_end_gradcheck(seed: int = 0, size: int = 64, fraction: float = 0.01,
                         config: ModelConfig = DEFAULT_CONFIG) -> Dict[str, float]:
    """Check d training_loss / d params on a sampled ``fraction`` of all scalars (float64)."""
    rng = np.random.default_rng(seed)
    with oracle_precision():
        params = init_params(config, seed).copy(np.float64)
        generic_point(params, rng)
        i1, i2 = shifted_pair(rng, size, size, margin=4)
        i1 = Tensor(i1[None].astype(np.float64))
        i2 = Tensor(i2[None].astype(np.float64))

        def loss_fn(p):
            return losses.training_loss(model_forward(i1, i2, p, config), i1, i2)

        return gradcheck.model_gradient_check(loss_fn, params, fraction=fraction, seed=seed)


def _backend_agreement(rng) -> Tuple[bool, str]:
    src = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
    flow = rng.uniform(-3, 3, (2, 2, 9, 11)).astype(np.float32)
    a = kernels.backwarp_forward(src, flow)
    b = numpy_kernels.backwarp_forward(src, flow)
    c1 = kernels.correlation_forward(src, src[::-1].copy(), 2)
    c2 = numpy_kernels.correlation_forward(src, src[::-1].copy(), 2)
    err = max(np.abs(a - b).max(), np.abs(c1 - c2).max())
    return bool(err < 1e-5), f"backend={kernels.BACKEND} max difference vs numpy {err:.1e}"


def run_selftest(seed: int = 0) -> Iterator[Tuple[str, bool, str]]:
    """Yield (name, passed, detail) for each check."""
    rng = np.random.default_rng(seed)

    img = rng.standard_normal((1, 1, 8, 12)).astype(np.float32)
    warped = ops.backwarp(Tensor(img), Tensor(np.zeros((1, 2, 8, 12), np.float32))).data
    yield "zero-flow warp", bool(np.array_equal(warped, img)), "bit-exact identity"

    yield ("kernel backends",) + _backend_agreement(rng)

    worst = max(r.worst for r in gradcheck.op_suite(instances=1, seed=seed))
    yield "op gradients", worst < 1e-5, f"worst relative error {worst:.1e}"

    params = init_params(DEFAULT_CONFIG, seed)
    ckpt = Checkpoint(params=params, epoch=3, phase="train")
    back = Checkpoint.from_bytes(ckpt.to_bytes())
    same = all(np.array_equal(params[k].data, back.params[k].data) for k in params.names())
    yield "checkpoint round trip", same and back.epoch == 3, f"{len(params.names())} tensors"

    proj = ProjectionConfig(width=64, height=16)
    cloud = np.array([[10.0, 0.0, 0.0], [0.0, 20.0, -1.0], [-5.0, -5.0, 0.2]])
    ranges = project_cloud(cloud, proj).ranges
    expected = np.sort(np.linalg.norm(cloud, axis=1))
    got = np.sort(ranges[ranges > 0])
    yield "projection", bool(np.allclose(got, expected, rtol=1e-6)), f"{got.size} of 3 points placed"

    i1, i2 = shifted_pair(rng, 64, 64, margin=4)
    flows = {l: Tensor(np.zeros((1, 2, 64 >> (l - 1), 64 >> (l - 1)), np.float32)) for l in range(1, 8)}
    zero = losses.training_loss(flows, Tensor(i1[None]), Tensor(i1[None])).item()
    yield "identical-frame loss", zero == 0.0, f"loss {zero:g}"
