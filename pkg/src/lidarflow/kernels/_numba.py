"""numba-compiled kernels, loop-for-loop twins of ``_numpy``."""

import math

import numpy as np
from numba import njit

fastmath = False
cache = True


@njit(fastmath=fastmath, cache=cache)
def backwarp_forward(src, flow):
    n, c, h, w = src.shape
    out = np.zeros_like(src)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                sx = x + flow[b, 0, y, x]
                sy = y + flow[b, 1, y, x]
                fx = math.floor(sx)
                fy = math.floor(sy)
                wx = sx - fx
                wy = sy - fy
                x0 = int(fx)
                y0 = int(fy)
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= h:
                        continue
                    wgt_y = wy if dy == 1 else 1.0 - wy
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= w:
                            continue
                        wgt = wgt_y * (wx if dx == 1 else 1.0 - wx)
                        for ch in range(c):
                            out[b, ch, y, x] += wgt * src[b, ch, yi, xi]
    return out


@njit(fastmath=fastmath, cache=cache)
def backwarp_backward(src, flow, gout):
    n, c, h, w = src.shape
    gsrc = np.zeros_like(src)
    gflow = np.zeros_like(flow)
    for b in range(n):
        for y in range(h):
            for x in range(w):
                sx = x + flow[b, 0, y, x]
                sy = y + flow[b, 1, y, x]
                fx = math.floor(sx)
                fy = math.floor(sy)
                wx = sx - fx
                wy = sy - fy
                x0 = int(fx)
                y0 = int(fy)
                gu = 0.0
                gv = 0.0
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= h:
                        continue
                    wgt_y = wy if dy == 1 else 1.0 - wy
                    dwy_sign = 1.0 if dy == 1 else -1.0
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= w:
                            continue
                        wgt_x = wx if dx == 1 else 1.0 - wx
                        dwx_sign = 1.0 if dx == 1 else -1.0
                        wgt = wgt_y * wgt_x
                        for ch in range(c):
                            g = gout[b, ch, y, x]
                            v = src[b, ch, yi, xi]
                            gsrc[b, ch, yi, xi] += wgt * g
                            gu += dwx_sign * wgt_y * v * g
                            gv += dwy_sign * wgt_x * v * g
                gflow[b, 0, y, x] = gu
                gflow[b, 1, y, x] = gv
    return gsrc, gflow


@njit(fastmath=fastmath, cache=cache)
def correlation_forward(f1, f2, max_disp):
    n, c, h, w = f1.shape
    d = 2 * max_disp + 1
    out = np.zeros((n, d * d, h, w), dtype=f1.dtype)
    inv_c = 1.0 / c
    for b in range(n):
        for k in range(d * d):
            dy = k // d - max_disp
            dx = k % d - max_disp
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            o = out[b, k]
            # x innermost keeps every access contiguous
            for ch in range(c):
                a = f1[b, ch]
                s = f2[b, ch]
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        o[y, x] += a[y, x] * s[y + dy, x + dx]
            for y in range(y0, y1):
                for x in range(x0, x1):
                    o[y, x] *= inv_c
    return out


@njit(fastmath=fastmath, cache=cache)
def correlation_backward(f1, f2, gout, max_disp):
    n, c, h, w = f1.shape
    d = 2 * max_disp + 1
    g1 = np.zeros_like(f1)
    g2 = np.zeros_like(f2)
    inv_c = 1.0 / c
    g = np.empty((h, w), dtype=gout.dtype)
    for b in range(n):
        for k in range(d * d):
            dy = k // d - max_disp
            dx = k % d - max_disp
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            for y in range(y0, y1):
                for x in range(x0, x1):
                    g[y, x] = gout[b, k, y, x] * inv_c
            for ch in range(c):
                a = f1[b, ch]
                s = f2[b, ch]
                ga = g1[b, ch]
                gs = g2[b, ch]
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        ga[y, x] += g[y, x] * s[y + dy, x + dx]
                        gs[y + dy, x + dx] += g[y, x] * a[y, x]
    return g1, g2


@njit(fastmath=fastmath, cache=cache)
def _col2im(cols, dx, stride, dilation):
    n, c, kh, kw, ho, wo = cols.shape
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for oy in range(ho):
                        yy = oy * stride + i * dilation
                        for ox in range(wo):
                            dx[b, ch, yy, ox * stride + j * dilation] += cols[b, ch, i, j, oy, ox]
    return dx


def col2im(cols, out_shape, stride, dilation):
    """Scatter-add (N, C, kh, kw, Ho, Wo) column gradients back onto a padded input."""
    dx = np.zeros(out_shape, dtype=cols.dtype)
    return _col2im(cols, dx, stride, dilation)
