"""Differentiable network ops on :class:`~lidarflow.tensor.Tensor`.

Conventions shared by the sampling ops:

* pixel ``(x, y)`` has its centre at integer coordinates;
* bilinear taps that fall outside the image contribute zero;
* flow channel 0 is the horizontal displacement ``u``, channel 1 the
  vertical ``v``, both in pixels of the tensor's own resolution.
"""

from __future__ import annotations

import functools
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels
from .errors import ShapeError
from .tensor import Tensor

LEAKY_SLOPE = 0.1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is (Cout, Cin, kh, kw); ``bias`` is (1, Cout, 1, 1).
    """
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin_w != cin:
        raise ShapeError("conv2d", "weight", f"(Cout, {cin}, kh, kw)", weight.shape)
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ShapeError("conv2d", "bias", (1, cout, 1, 1), bias.shape)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "input", f"spatial extent large enough for a {kh}x{kw} kernel", x.shape)

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = x.data
        cols = xp.reshape(n, cin, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def _backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        # cols are rebuilt rather than kept alive between forward and backward
        c = cols if pointwise else _im2col(xp, kh, kw, stride, dilation, ho, wo)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = gcols.reshape(n, cin, h, w)
            else:
                gxp = kernels.col2im(gcols.reshape(n, cin, kh, kw, ho, wo), xp.shape, stride, dilation)
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        gw = None
        if weight.requires_grad:
            gw = np.zeros_like(w2)
            for b in range(n):
                gw += g2[b] @ c[b].T
            gw = gw.reshape(weight.shape)
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=(0, 2)).reshape(1, cout, 1, 1),)
        return grads

    return Tensor._from_op(out, parents, _backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    pos = xd > 0
    s = xd.dtype.type(slope)
    return Tensor._from_op(np.where(pos, xd, s * xd), (x,), lambda g: (np.where(pos, g, s * g),))


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    out = half * (np.tanh(half * x.data) + 1)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str = "leaky_relu") -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def pool(x: Tensor, axis: str, kind: str) -> Tensor:
    """Global pooling over space (-> (N, C, 1, 1)) or channels (-> (N, 1, H, W)).

    Max pooling sends the gradient to the first maximal element in flat order.
    """
    n, c, h, w = x.shape
    if axis == "spatial":
        flat = x.data.reshape(n, c, h * w)
        red_axis, out_shape = 2, (n, c, 1, 1)
    elif axis == "channel":
        flat = x.data.reshape(n, c, h * w)
        red_axis, out_shape = 1, (n, 1, h, w)
    else:
        raise ValueError(f"unknown pooling axis {axis!r}")

    if kind == "avg":
        count = flat.shape[red_axis]
        out = flat.mean(axis=red_axis, keepdims=True, dtype=x.dtype)

        def _backward(g):
            gflat = np.broadcast_to(g.reshape(out.shape) / x.dtype.type(count), flat.shape)
            return (gflat.reshape(x.shape).copy(),)

    elif kind == "max":
        idx = np.argmax(flat, axis=red_axis)
        out = np.take_along_axis(flat, np.expand_dims(idx, red_axis), axis=red_axis)

        def _backward(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, np.expand_dims(idx, red_axis), g.reshape(out.shape), axis=red_axis)
            return (gflat.reshape(x.shape),)

    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return Tensor._from_op(out.reshape(out_shape), (x,), _backward)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (extents must be even)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2x", "input", "even height and width", x.shape)
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=x.dtype)
    quarter = x.dtype.type(0.25)

    def _backward(g):
        return (np.repeat(np.repeat(g * quarter, 2, axis=2), 2, axis=3),)

    return Tensor._from_op(out, (x,), _backward)


@functools.lru_cache(maxsize=64)
def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # sample centres at (i + 0.5) / 2 - 0.5, clamped to the valid range
    m = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        frac = src - i0
        m[i, i0] += 1.0 - frac
        if frac > 0:
            m[i, i0 + 1] += frac
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear upsampling to (2H, 2W), pixel-centre aligned, no corner alignment."""
    n, c, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype.type)
    uw = _upsample_matrix(w, x.dtype.type)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return Tensor._from_op(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def backwarp(source: Tensor, flow: Tensor) -> Tensor:
    """Sample ``source`` at ``(x + u, y + v)`` for every output pixel."""
    n, c, h, w = source.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError("backwarp", "flow", (n, 2, h, w), flow.shape)
    src = np.ascontiguousarray(source.data)
    fl = np.ascontiguousarray(flow.data, dtype=src.dtype)
    out = kernels.backwarp_forward(src, fl)

    def _backward(g):
        gsrc, gflow = kernels.backwarp_backward(src, fl, np.ascontiguousarray(g))
        return gsrc, gflow

    return Tensor._from_op(out, (source, flow), _backward)


def correlation(f1: Tensor, f2: Tensor, max_disp: int) -> Tensor:
    """Channel-averaged dot products between ``f1`` and displaced ``f2``.

    Output channel ``(dy + r) * (2r + 1) + (dx + r)`` holds the score for
    displacement ``(dx, dy)``.
    """
    if f1.shape != f2.shape:
        raise ShapeError("correlation", "f2", f1.shape, f2.shape)
    if max_disp < 1:
        raise ValueError("correlation: max_disp must be positive")
    a = np.ascontiguousarray(f1.data)
    b = np.ascontiguousarray(f2.data)
    out = kernels.correlation_forward(a, b, max_disp)

    def _backward(g):
        return kernels.correlation_backward(a, b, np.ascontiguousarray(g), max_disp)

    return Tensor._from_op(out, (f1, f2), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], 1):
        expect = tuple(s if d != axis else t.shape[d] for d, s in enumerate(ref))
        if t.shape != expect:
            raise ShapeError("concat", f"tensors[{i}]", expect, t.shape)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def _backward(g):
        index = [slice(None)] * 4
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return Tensor._from_op(out, tensors, _backward)


def split_batch(x: Tensor, sizes: Sequence[int]) -> list:
    """Split along the batch axis into consecutive chunks."""
    if sum(sizes) != x.shape[0]:
        raise ShapeError("split_batch", "sizes", f"summing to {x.shape[0]}", tuple(sizes))
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size

        def _backward(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            return (full,)

        outs.append(Tensor._from_op(x.data[lo:hi], (x,), _backward))
        lo = hi
    return outs
