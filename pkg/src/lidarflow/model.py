"""Coarse-to-fine flow network for range images.

Seven pyramid levels (level 1 is the input image), per-level CBAM attention
on the features, a warped cost volume, one flow estimator shared by all
levels and one dilated context network shared by all levels.

Parameter names::

    pyramid.l{2..7}.conv{1,2}.{weight,bias}
    cbam.l{2..7}.{mlp1,mlp2,spatial}.{weight,bias}
    adapter.l{2..7}.{weight,bias}
    estimator.conv{1..6}.{weight,bias}
    context.conv{1..7}.{weight,bias}
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .errors import ShapeError
from .optim import ParameterStore
from .tensor import Tensor, scale

LEVELS = tuple(range(2, 8))


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    pyramid_channels: Tuple[int, ...] = (1, 16, 32, 64, 96, 128, 192)
    estimator_channels: Tuple[int, ...] = (128, 128, 96, 64, 32, 2)
    context_dilations: Tuple[int, ...] = (1, 2, 4, 8, 16, 1, 1)
    context_channels: Tuple[int, ...] = (128, 128, 128, 96, 64, 32, 2)
    cost_radius: int = 4
    adapter_channels: int = 32
    leaky_slope: float = 0.1
    cbam_reduction: int = 16
    cbam_kernel: int = 7
    use_cbam: bool = True
    context_every_level: bool = True

    def __post_init__(self):
        if len(self.pyramid_channels) != 7:
            raise ValueError("pyramid_channels must list 7 levels")
        if self.pyramid_channels[0] != 1:
            raise ValueError("level-1 input must have a single (range) channel")
        if self.estimator_channels[-1] != 2 or self.context_channels[-1] != 2:
            raise ValueError("estimator and context network must end in 2 flow channels")
        if len(self.context_dilations) != len(self.context_channels):
            raise ValueError("context_dilations and context_channels differ in length")

    @property
    def cost_channels(self) -> int:
        return (2 * self.cost_radius + 1) ** 2

    @property
    def estimator_in(self) -> int:
        return 2 + self.adapter_channels + self.cost_channels

    def cbam_hidden(self, channels: int) -> int:
        return max(channels // self.cbam_reduction, 1)


DEFAULT_CONFIG = ModelConfig()


def _estimator_inputs(config: ModelConfig) -> list:
    """Input width of each estimator layer (layer k sees outputs of k-1 and k-2)."""
    widths = [config.estimator_in]
    ch = config.estimator_channels
    for k in range(1, len(ch)):
        prev2 = config.estimator_in if k == 1 else ch[k - 2]
        widths.append(ch[k - 1] + prev2)
    return widths


def _add_conv(store, rng, name, cout, cin, k, slope):
    fan_in = cin * k * k
    bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32))
    store.add(f"{name}.bias", np.zeros((1, cout, 1, 1), dtype=np.float32))


def init_params(config: ModelConfig = DEFAULT_CONFIG, seed: int = 0) -> ParameterStore:
    """Fan-in scaled uniform weights, zero biases. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    s = config.leaky_slope
    pc = config.pyramid_channels
    for l in LEVELS:
        cin, cout = pc[l - 2], pc[l - 1]
        _add_conv(store, rng, f"pyramid.l{l}.conv1", cout, cin, 3, s)
        _add_conv(store, rng, f"pyramid.l{l}.conv2", cout, cout, 3, s)
        if config.use_cbam:
            hidden = config.cbam_hidden(cout)
            _add_conv(store, rng, f"cbam.l{l}.mlp1", hidden, cout, 1, s)
            _add_conv(store, rng, f"cbam.l{l}.mlp2", cout, hidden, 1, s)
            _add_conv(store, rng, f"cbam.l{l}.spatial", 1, 2, config.cbam_kernel, s)
        _add_conv(store, rng, f"adapter.l{l}", config.adapter_channels, cout, 1, s)
    for k, (cin, cout) in enumerate(zip(_estimator_inputs(config), config.estimator_channels), 1):
        _add_conv(store, rng, f"estimator.conv{k}", cout, cin, 3, s)
    cin = config.estimator_channels[-2] + 2
    for k, cout in enumerate(config.context_channels, 1):
        _add_conv(store, rng, f"context.conv{k}", cout, cin, 3, s)
        cin = cout
    return store


def _conv(x, params, name, **kw):
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], **kw)


def check_input_extents(image: Tensor) -> None:
    _, c, h, w = image.shape
    if c != 1:
        raise ShapeError("model", "image", "(N, 1, H, W)", image.shape)
    if h % 64 or w % 64:
        raise ShapeError(
            "model", "image",
            "height and width divisible by 64; pad the range image (see lidarflow.model.pad_to_multiple)",
            image.shape,
        )


def pad_to_multiple(image: np.ndarray, multiple: int = 64) -> np.ndarray:
    """Zero-pad the last two axes of ``image`` up to a multiple of ``multiple``."""
    h, w = image.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad)


def pyramid_forward(image: Tensor, params: ParameterStore, config: ModelConfig = DEFAULT_CONFIG) -> Dict[int, Tensor]:
    check_input_extents(image)
    feats = {}
    x = image
    for l in LEVELS:
        x = ops.leaky_relu(_conv(x, params, f"pyramid.l{l}.conv1", stride=2, padding=1), config.leaky_slope)
        x = ops.leaky_relu(_conv(x, params, f"pyramid.l{l}.conv2", stride=1, padding=1), config.leaky_slope)
        feats[l] = x
    return feats


def cbam_forward(x: Tensor, params: ParameterStore, prefix: str, config: ModelConfig = DEFAULT_CONFIG) -> Tensor:
    """Channel gate from pooled descriptors, then spatial gate from a 7x7 conv."""

    def mlp(v):
        hidden = ops.leaky_relu(_conv(v, params, f"{prefix}.mlp1"), config.leaky_slope)
        return _conv(hidden, params, f"{prefix}.mlp2")

    channel_gate = ops.sigmoid(mlp(ops.pool(x, "spatial", "avg")) + mlp(ops.pool(x, "spatial", "max")))
    xc = x * channel_gate
    desc = ops.concat([ops.pool(xc, "channel", "avg"), ops.pool(xc, "channel", "max")], axis=1)
    spatial_gate = ops.sigmoid(_conv(desc, params, f"{prefix}.spatial", padding=config.cbam_kernel // 2))
    return xc * spatial_gate


def build_cost_volume(
    f1: Tensor, f2: Tensor, up_flow: Optional[Tensor], config: ModelConfig = DEFAULT_CONFIG
) -> Tuple[Tensor, Tensor]:
    if f1.shape != f2.shape:
        raise ShapeError("build_cost_volume", "f2", f1.shape, f2.shape)
    warped = f2 if up_flow is None else ops.backwarp(f2, up_flow)
    cv = ops.correlation(f1, warped, config.cost_radius)
    return ops.leaky_relu(cv, config.leaky_slope), warped


def estimate_flow_level(
    f1: Tensor,
    cv: Tensor,
    up_flow: Optional[Tensor],
    params: ParameterStore,
    level: int,
    config: ModelConfig = DEFAULT_CONFIG,
) -> Tuple[Tensor, Tensor]:
    """Shared estimator. Returns (flow, penultimate activation)."""
    n, _, h, w = f1.shape
    if up_flow is None:
        up_flow = Tensor(np.zeros((n, 2, h, w)))
    adapted = ops.leaky_relu(_conv(f1, params, f"adapter.l{level}"), config.leaky_slope)
    x_in = ops.concat([up_flow, adapted, cv], axis=1)
    outs = [x_in]
    n_layers = len(config.estimator_channels)
    for k in range(1, n_layers + 1):
        inp = outs[-1] if k == 1 else ops.concat([outs[-1], outs[-2]], axis=1)
        y = _conv(inp, params, f"estimator.conv{k}", padding=1)
        if k < n_layers:
            y = ops.leaky_relu(y, config.leaky_slope)
        outs.append(y)
    return outs[-1], outs[-2]


def context_refine(penult: Tensor, flow: Tensor, params: ParameterStore, config: ModelConfig = DEFAULT_CONFIG) -> Tensor:
    if penult.shape[2:] != flow.shape[2:]:
        raise ShapeError("context_refine", "flow", f"spatial extents {penult.shape[2:]}", flow.shape)
    x = ops.concat([penult, flow], axis=1)
    n_layers = len(config.context_channels)
    for k, d in enumerate(config.context_dilations, 1):
        x = _conv(x, params, f"context.conv{k}", padding=d, dilation=d)
        if k < n_layers:
            x = ops.leaky_relu(x, config.leaky_slope)
    return flow + x


def upscale_flow(flow: Tensor) -> Tensor:
    """Bilinear 2x upsampling with displacements doubled into the finer grid's pixels."""
    return scale(ops.upsample2x(flow), 2.0)


def model_forward(
    i1: Tensor, i2: Tensor, params: ParameterStore, config: ModelConfig = DEFAULT_CONFIG
) -> Dict[int, Tensor]:
    """Forward flow I1 -> I2 at every level 1..7, each in its own pixel units."""
    if i1.shape != i2.shape:
        raise ShapeError("model_forward", "I2", i1.shape, i2.shape)
    check_input_extents(i1)
    n = i1.shape[0]
    feats = pyramid_forward(ops.concat([i1, i2], axis=0), params, config)
    flows: Dict[int, Tensor] = {}
    up = None
    for l in reversed(LEVELS):
        x = feats[l]
        if config.use_cbam:
            x = cbam_forward(x, params, f"cbam.l{l}", config)
        f1, f2 = ops.split_batch(x, [n, n])
        cv, _ = build_cost_volume(f1, f2, up, config)
        flow, penult = estimate_flow_level(f1, cv, up, params, l, config)
        if config.context_every_level or l == LEVELS[0]:
            flow = context_refine(penult, flow, params, config)
        flows[l] = flow
        if l > LEVELS[0]:
            up = upscale_flow(flow)
    flows[1] = upscale_flow(flows[LEVELS[0]])
    return dict(sorted(flows.items()))


def param_count(params: ParameterStore) -> int:
    return params.num_scalars()
