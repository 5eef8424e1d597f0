"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature and the
same results up to floating-point summation order.
"""

import numpy as np


def _bilinear_corners(flow, h, w):
    n = flow.shape[0]
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sx = gx[None].astype(flow.dtype) + flow[:, 0]
    sy = gy[None].astype(flow.dtype) + flow[:, 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.broadcast_to(np.arange(n)[:, None, None], x0.shape)
    return bidx, x0, y0, wx, wy


def _corner_terms(wx, wy):
    # (dy, dx, weight, d_weight/d_x, d_weight/d_y) for the four neighbours
    one = np.ones_like(wx)
    return (
        (0, 0, (one - wx) * (one - wy), -(one - wy), -(one - wx)),
        (0, 1, wx * (one - wy), one - wy, -wx),
        (1, 0, (one - wx) * wy, -wy, one - wx),
        (1, 1, wx * wy, wy, wx),
    )


def backwarp_forward(src, flow):
    n, c, h, w = src.shape
    bidx, x0, y0, wx, wy = _bilinear_corners(flow, h, w)
    out = np.zeros_like(src)
    for dy, dx, wgt, _, _ in _corner_terms(wx, wy):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        # (n, h, w, c) gather, then back to channel-first
        vals = src.transpose(0, 2, 3, 1)[bidx, yc, xc]
        vals = np.where(valid[..., None], vals, 0).transpose(0, 3, 1, 2)
        out += wgt[:, None] * vals
    return out


def backwarp_backward(src, flow, gout):
    n, c, h, w = src.shape
    bidx, x0, y0, wx, wy = _bilinear_corners(flow, h, w)
    gsrc = np.zeros(n * h * w * c, dtype=src.dtype)
    gflow = np.zeros_like(flow)
    src_t = src.transpose(0, 2, 3, 1)
    gout_t = gout.transpose(0, 2, 3, 1)
    chan = np.arange(c)
    for dy, dx, wgt, dwx, dwy in _corner_terms(wx, wy):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        vals = np.where(valid[..., None], src_t[bidx, yc, xc], 0)
        dot = (vals * gout_t).sum(-1)
        gflow[:, 0] += dwx * dot
        gflow[:, 1] += dwy * dot
        contrib = np.where(valid[..., None], wgt[..., None] * gout_t, 0)
        flat = ((bidx * h + yc) * w + xc)[..., None] * c + chan
        gsrc += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=gsrc.size).astype(src.dtype)
    gsrc = gsrc.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gsrc), gflow


def _shift_window(h, w, dy, dx):
    # output rows/cols whose displaced partner (y+dy, x+dx) is in range
    y_lo, y_hi = max(0, -dy), min(h, h - dy)
    x_lo, x_hi = max(0, -dx), min(w, w - dx)
    return y_lo, y_hi, x_lo, x_hi


def correlation_forward(f1, f2, max_disp):
    n, c, h, w = f1.shape
    d = 2 * max_disp + 1
    out = np.zeros((n, d * d, h, w), dtype=f1.dtype)
    k = 0
    for dy in range(-max_disp, max_disp + 1):
        for dx in range(-max_disp, max_disp + 1):
            y_lo, y_hi, x_lo, x_hi = _shift_window(h, w, dy, dx)
            if y_lo < y_hi and x_lo < x_hi:
                a = f1[:, :, y_lo:y_hi, x_lo:x_hi]
                b = f2[:, :, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx]
                out[:, k, y_lo:y_hi, x_lo:x_hi] = (a * b).sum(1) / c
            k += 1
    return out


def correlation_backward(f1, f2, gout, max_disp):
    n, c, h, w = f1.shape
    g1 = np.zeros_like(f1)
    g2 = np.zeros_like(f2)
    k = 0
    for dy in range(-max_disp, max_disp + 1):
        for dx in range(-max_disp, max_disp + 1):
            y_lo, y_hi, x_lo, x_hi = _shift_window(h, w, dy, dx)
            if y_lo < y_hi and x_lo < x_hi:
                g = gout[:, k:k + 1, y_lo:y_hi, x_lo:x_hi] / c
                g1[:, :, y_lo:y_hi, x_lo:x_hi] += g * f2[:, :, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx]
                g2[:, :, y_lo + dy:y_hi + dy, x_lo + dx:x_hi + dx] += g * f1[:, :, y_lo:y_hi, x_lo:x_hi]
            k += 1
    return g1, g2


def col2im(cols, out_shape, stride, dilation):
    """Scatter-add (N, C, kh, kw, Ho, Wo) column gradients back onto a padded input."""
    n, c, kh, kw, ho, wo = cols.shape
    dx = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0 = i * dilation
            x0 = j * dilation
            dx[:, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return dx
