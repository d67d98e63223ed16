"""Pure numpy implementations of the convolution and pooling kernels.

This is the fallback backend; the compiled extension in ``_convkern`` exposes
the same six functions with identical semantics.  Everything is float64,
NCHW layout.  Pooling windows are fixed at 3x3 with padding 1, which is the
only window the search space uses.
"""

from __future__ import annotations

import numpy as np


def _out_len(n: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (n + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _window_view(xp: np.ndarray, kh: int, kw: int, stride: int, dil: int,
                 ho: int, wo: int) -> np.ndarray:
    """Strided (B, C, kh, kw, ho, wo) view of a padded NCHW array."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh * dil, sw * dil, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d_fwd(x, w, stride, padding, dilation, groups):
    b, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    ho = _out_len(h, kh, stride, padding, dilation)
    wo = _out_len(wd, kw, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _window_view(xp, kh, kw, stride, dilation, ho, wo)
    if groups == 1:
        y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if groups == cin and cout == cin:
        # depthwise
        y = np.einsum("bcijhw,cij->bchw", cols, w[:, 0], optimize=True)
        return np.ascontiguousarray(y)
    y = np.empty((b, cout, ho, wo), dtype=x.dtype)
    cog = cout // groups
    for g in range(groups):
        cs, ce = g * cig, (g + 1) * cig
        os, oe = g * cog, (g + 1) * cog
        yg = np.tensordot(w[os:oe], cols[:, cs:ce], axes=([1, 2, 3], [1, 2, 3]))
        y[:, os:oe] = yg.transpose(1, 0, 2, 3)
    return y


def conv2d_bwd(x, w, gy, stride, padding, dilation, groups):
    b, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _window_view(xp, kh, kw, stride, dilation, ho, wo)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    depthwise = groups == cin and cout == cin
    if groups == 1:
        gw[:] = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))
    elif depthwise:
        gw[:, 0] = np.einsum("bchw,bcijhw->cij", gy, cols, optimize=True)
    else:
        cog = cout // groups
        for g in range(groups):
            cs, ce = g * cig, (g + 1) * cig
            os, oe = g * cog, (g + 1) * cog
            gw[os:oe] = np.tensordot(gy[:, os:oe], cols[:, cs:ce],
                                     axes=([0, 2, 3], [0, 4, 5]))
    for i in range(kh):
        hs = slice(i * dilation, i * dilation + ho * stride, stride)
        for j in range(kw):
            ws = slice(j * dilation, j * dilation + wo * stride, stride)
            if groups == 1:
                term = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))
                gxp[:, :, hs, ws] += term.transpose(0, 3, 1, 2)
            elif depthwise:
                gxp[:, :, hs, ws] += gy * w[:, 0, i, j][None, :, None, None]
            else:
                cog = cout // groups
                for g in range(groups):
                    cs, ce = g * cig, (g + 1) * cig
                    os, oe = g * cog, (g + 1) * cog
                    term = np.tensordot(gy[:, os:oe], w[os:oe, :, i, j],
                                        axes=([1], [0]))
                    gxp[:, cs:ce, hs, ws] += term.transpose(0, 3, 1, 2)
    gx = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(gx), gw


def _pool_counts(h, w, ho, wo, stride):
    """Valid-cell counts per output position for a 3x3 window, padding 1."""
    hc = np.zeros(ho, dtype=np.float64)
    for o in range(ho):
        base = o * stride - 1
        hc[o] = sum(1 for i in range(3) if 0 <= base + i < h)
    wc = np.zeros(wo, dtype=np.float64)
    for o in range(wo):
        base = o * stride - 1
        wc[o] = sum(1 for j in range(3) if 0 <= base + j < w)
    return hc[:, None] * wc[None, :]


def maxpool3_fwd(x, stride):
    b, c, h, w = x.shape
    ho = _out_len(h, 3, stride, 1, 1)
    wo = _out_len(w, 3, stride, 1, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)),
                constant_values=-np.inf)
    cols = _window_view(xp, 3, 3, stride, 1, ho, wo)
    flat = cols.reshape(b, c, 9, ho, wo)
    widx = flat.argmax(axis=2)
    y = np.take_along_axis(flat, widx[:, :, None], axis=2)[:, :, 0]
    ho_grid = np.arange(ho)[:, None] * stride
    wo_grid = np.arange(wo)[None, :] * stride
    hi = ho_grid[None, None] + widx // 3
    wi = wo_grid[None, None] + widx % 3
    idx = (hi * (w + 2) + wi).astype(np.int64)
    return np.ascontiguousarray(y), idx


def maxpool3_bwd(x_shape, idx, gy, stride):
    b, c, h, w = x_shape
    hp, wp = h + 2, w + 2
    gxf = np.zeros((b * c, hp * wp), dtype=gy.dtype)
    rows = np.arange(b * c)[:, None]
    np.add.at(gxf, (rows, idx.reshape(b * c, -1)), gy.reshape(b * c, -1))
    gxp = gxf.reshape(b, c, hp, wp)
    return np.ascontiguousarray(gxp[:, :, 1:1 + h, 1:1 + w])


def avgpool3_fwd(x, stride):
    b, c, h, w = x.shape
    ho = _out_len(h, 3, stride, 1, 1)
    wo = _out_len(w, 3, stride, 1, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _window_view(xp, 3, 3, stride, 1, ho, wo)
    counts = _pool_counts(h, w, ho, wo, stride)
    # accumulate tap by tap in window order so both backends round alike
    y = np.zeros((b, c, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            y = y + cols[:, :, i, j]
    return np.ascontiguousarray(y / counts)


def avgpool3_bwd(x_shape, gy, stride):
    b, c, h, w = x_shape
    _, _, ho, wo = gy.shape
    counts = _pool_counts(h, w, ho, wo, stride)
    g = gy / counts
    gxp = np.zeros((b, c, h + 2, w + 2), dtype=gy.dtype)
    for i in range(3):
        hs = slice(i, i + ho * stride, stride)
        for j in range(3):
            ws = slice(j, j + wo * stride, stride)
            gxp[:, :, hs, ws] += g
    return np.ascontiguousarray(gxp[:, :, 1:1 + h, 1:1 + w])
