"""Finite-difference oracles for the autodiff engine.

All checks run in float64 (:func:`~lidarflow.tensor.oracle_precision`). The
scalar probed is ``sum(op(inputs) * R)`` with a fixed random ``R`` so every
output element contributes. Errors are relative in the Euclidean norm:
``|analytic - numeric| / max(|analytic|, |numeric|)``.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, mul, oracle_precision, sqrt, square, sum_all

STEP = 1e-4


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = STEP, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``array`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are probed; the rest
    of the returned gradient is zero.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0, h: float = STEP) -> float:
    """Largest relative error over all inputs of ``fn`` (float64 arrays)."""
    with oracle_precision():
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        out = fn(*leaves)
        weights = Tensor(np.random.default_rng(seed).standard_normal(out.shape))

        def scalar():
            return float(sum_all(mul(fn(*leaves), weights)).item())

        loss = sum_all(mul(out, weights))
        backward(loss)
        worst = 0.0
        for leaf in leaves:
            numeric = numerical_gradient(scalar, leaf.data, h)
            worst = max(worst, relative_error(leaf.grad, numeric))
    return worst


def _away_from_integers(rng, shape, scale):
    # flows whose fractional parts stay clear of the bilinear kinks
    base = rng.uniform(-scale, scale, shape)
    frac = base - np.floor(base)
    return np.floor(base) + np.clip(frac, 0.05, 0.95)


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + x, x)


def op_cases(rng: np.random.Generator) -> Dict[str, tuple]:
    """One random small instance of every differentiable op: name -> (fn, inputs)."""
    x = lambda *s: rng.standard_normal(s)  # noqa: E731
    return {
        "conv2d": (lambda a, w, b: ops.conv2d(a, w, b, stride=1, padding=1), [x(2, 3, 6, 6), x(4, 3, 3, 3), x(1, 4, 1, 1)]),
        "conv2d_stride2": (lambda a, w, b: ops.conv2d(a, w, b, stride=2, padding=1), [x(2, 3, 8, 8), x(4, 3, 3, 3), x(1, 4, 1, 1)]),
        "conv2d_dilation2": (lambda a, w, b: ops.conv2d(a, w, b, padding=2, dilation=2), [x(2, 3, 8, 8), x(2, 3, 3, 3), x(1, 2, 1, 1)]),
        "conv2d_1x1": (lambda a, w, b: ops.conv2d(a, w, b), [x(2, 3, 4, 5), x(4, 3, 1, 1), x(1, 4, 1, 1)]),
        "leaky_relu": (ops.leaky_relu, [_away_from_zero(rng, (2, 3, 4, 4))]),
        "sigmoid": (ops.sigmoid, [x(2, 3, 4, 4)]),
        "pool_spatial_avg": (lambda a: ops.pool(a, "spatial", "avg"), [x(2, 3, 4, 5)]),
        "pool_spatial_max": (lambda a: ops.pool(a, "spatial", "max"), [x(2, 3, 4, 5)]),
        "pool_channel_avg": (lambda a: ops.pool(a, "channel", "avg"), [x(2, 3, 4, 5)]),
        "pool_channel_max": (lambda a: ops.pool(a, "channel", "max"), [x(2, 3, 4, 5)]),
        "avg_pool2x": (ops.avg_pool2x, [x(2, 2, 4, 6)]),
        "upsample2x": (ops.upsample2x, [x(2, 2, 3, 4)]),
        "backwarp": (ops.backwarp, [x(2, 3, 5, 6), _away_from_integers(rng, (2, 2, 5, 6), 2.0)]),
        "correlation": (lambda a, b: ops.correlation(a, b, 2), [x(2, 3, 5, 6), x(2, 3, 5, 6)]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), [x(2, 2, 3, 3), x(2, 3, 3, 3)]),
        "split_batch": (lambda a: ops.split_batch(a, [1, 2])[1], [x(3, 2, 3, 3)]),
        "mul_broadcast": (lambda a, b: a * b, [x(2, 3, 4, 4), x(2, 3, 1, 1)]),
        "add_broadcast": (lambda a, b: a + b, [x(2, 3, 4, 4), x(2, 1, 4, 4)]),
        "square": (square, [x(2, 2, 3, 3)]),
        "sqrt": (sqrt, [rng.uniform(0.5, 2.0, (2, 2, 3, 3))]),
        "sum_all": (sum_all, [x(2, 2, 3, 3)]),
    }


@dataclasses.dataclass
class OpResult:
    name: str
    errors: List[float]

    @property
    def worst(self) -> float:
        return max(self.errors)


def op_suite(instances: int = 5, seed: int = 0) -> List[OpResult]:
    """Check every op on ``instances`` independent random inputs."""
    results: Dict[str, OpResult] = {}
    for k in range(instances):
        rng = np.random.default_rng(seed + k)
        for name, (fn, inputs) in op_cases(rng).items():
            err = check_function(fn, inputs, seed=seed + k)
            results.setdefault(name, OpResult(name, [])).errors.append(err)
    return list(results.values())


def sample_parameter_indices(params, fraction: float, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Pick ``fraction`` of all scalars uniformly, at least one per tensor."""
    chosen = {}
    for name, p in params.items():
        size = p.data.size
        k = max(1, int(round(fraction * size)))
        chosen[name] = np.sort(rng.choice(size, size=k, replace=False))
    return chosen


def model_gradient_check(
    loss_fn: Callable,
    params,
    fraction: float = 0.01,
    directions: int = 4,
    seed: int = 0,
    h: float = STEP,
) -> Dict[str, float]:
    """End-to-end check of d loss / d params on a sampled subset of scalars.

    ``loss_fn(params)`` must build the loss from ``params`` (float64). The
    sampled subset is probed two ways: a central difference on one sampled
    scalar of every tensor, and directional derivatives along random unit
    directions supported on the whole subset. Returns the worst relative
    error of each kind.
    """
    rng = np.random.default_rng(seed)
    chosen = sample_parameter_indices(params, fraction, rng)
    params.zero_grad()
    backward(loss_fn(params), params)
    analytic = {name: params[name].grad.reshape(-1)[idx].copy() for name, idx in chosen.items()}

    def value():
        return float(loss_fn(params).item())

    per_entry_a, per_entry_n = [], []
    for name, idx in chosen.items():
        i = int(idx[rng.integers(len(idx))])
        flat = params[name].data.reshape(-1)
        numeric = numerical_gradient(value, flat, h, indices=[i])[i]
        per_entry_a.append(params[name].grad.reshape(-1)[i])
        per_entry_n.append(numeric)
    coord_err = relative_error(np.array(per_entry_a), np.array(per_entry_n))

    dir_err = 0.0
    for _ in range(directions):
        dirs = {name: rng.standard_normal(len(idx)) for name, idx in chosen.items()}
        length = np.sqrt(sum(float(d @ d) for d in dirs.values()))
        dirs = {name: d / length for name, d in dirs.items()}

        def shifted(t):
            saved = {}
            for name, idx in chosen.items():
                flat = params[name].data.reshape(-1)
                saved[name] = flat[idx].copy()
                flat[idx] += t * dirs[name]
            v = value()
            for name, idx in chosen.items():
                params[name].data.reshape(-1)[idx] = saved[name]
            return v

        numeric = (shifted(h) - shifted(-h)) / (2 * h)
        exact = sum(float(analytic[name] @ dirs[name]) for name in chosen)
        dir_err = max(dir_err, relative_error(np.array([exact]), np.array([numeric])))
    params.zero_grad()
    return {"coordinate": coord_err, "directional": dir_err, "sampled_scalars": int(sum(len(v) for v in chosen.values()))}
