# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Mirrors the interface of ``_kernels_np`` exactly: float64 NCHW arrays in,
float64 arrays out.  Pooling is fixed 3x3, padding 1.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_fwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
               int stride, int padding, int dilation, int groups):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], Cig = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - dilation * (KH - 1) - 1) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - dilation * (KW - 1) - 1) // stride + 1
    cdef Py_ssize_t Cog = Cout // groups
    y_arr = np.zeros((B, Cout, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, co, g, ci, i, j, ho, wo, hi, wi, ci0
    cdef double acc, wv
    with nogil:
        for b in range(B):
            for co in range(Cout):
                g = co // Cog
                ci0 = g * Cig
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = 0.0
                        for ci in range(Cig):
                            for i in range(KH):
                                hi = ho * stride - padding + i * dilation
                                if hi < 0 or hi >= H:
                                    continue
                                for j in range(KW):
                                    wi = wo * stride - padding + j * dilation
                                    if wi < 0 or wi >= W:
                                        continue
                                    acc = acc + x[b, ci0 + ci, hi, wi] * w[co, ci, i, j]
                        y[b, co, ho, wo] = acc
    return y_arr


def conv2d_bwd(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
               double[:, :, :, ::1] gy, int stride, int padding,
               int dilation, int groups):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], Cig = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t Cog = Cout // groups
    gx_arr = np.zeros((B, Cin, H, W), dtype=np.float64)
    gw_arr = np.zeros((Cout, Cig, KH, KW), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, co, g, ci, i, j, ho, wo, hi, wi, ci0
    cdef double gv
    with nogil:
        for b in range(B):
            for co in range(Cout):
                g = co // Cog
                ci0 = g * Cig
                for ho in range(Ho):
                    for wo in range(Wo):
                        gv = gy[b, co, ho, wo]
                        if gv == 0.0:
                            continue
                        for ci in range(Cig):
                            for i in range(KH):
                                hi = ho * stride - padding + i * dilation
                                if hi < 0 or hi >= H:
                                    continue
                                for j in range(KW):
                                    wi = wo * stride - padding + j * dilation
                                    if wi < 0 or wi >= W:
                                        continue
                                    gx[b, ci0 + ci, hi, wi] += gv * w[co, ci, i, j]
                                    gw[co, ci, i, j] += gv * x[b, ci0 + ci, hi, wi]
    return gx_arr, gw_arr


def maxpool3_fwd(double[:, :, :, ::1] x, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 - 3) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 - 3) // stride + 1
    cdef Py_ssize_t Wp = W + 2
    y_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef long long[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, ho, wo, i, j, hi, wi, best_h, best_w
    cdef double best, v
    cdef int started
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        best = 0.0
                        best_h = 0
                        best_w = 0
                        started = 0
                        for i in range(3):
                            hi = ho * stride - 1 + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(3):
                                wi = wo * stride - 1 + j
                                if wi < 0 or wi >= W:
                                    continue
                                v = x[b, c, hi, wi]
                                if started == 0 or v > best:
                                    best = v
                                    best_h = hi
                                    best_w = wi
                                    started = 1
                        y[b, c, ho, wo] = best
                        idx[b, c, ho, wo] = (best_h + 1) * Wp + (best_w + 1)
    return y_arr, idx_arr


def maxpool3_bwd(x_shape, long long[:, :, :, ::1] idx,
                 double[:, :, :, ::1] gy, int stride):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t Wp = W + 2
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, c, ho, wo, hi, wi
    cdef long long flat
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        flat = idx[b, c, ho, wo]
                        hi = flat // Wp - 1
                        wi = flat % Wp - 1
                        gx[b, c, hi, wi] += gy[b, c, ho, wo]
    return gx_arr


def avgpool3_fwd(double[:, :, :, ::1] x, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 - 3) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 - 3) // stride + 1
    y_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef Py_ssize_t b, c, ho, wo, i, j, hi, wi
    cdef double acc
    cdef int cnt
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        acc = 0.0
                        cnt = 0
                        for i in range(3):
                            hi = ho * stride - 1 + i
                            if hi < 0 or hi >= H:
                                continue
                            for j in range(3):
                                wi = wo * stride - 1 + j
                                if wi < 0 or wi >= W:
                                    continue
                                acc = acc + x[b, c, hi, wi]
                                cnt = cnt + 1
                        y[b, c, ho, wo] = acc / cnt
    return y_arr


def avgpool3_bwd(x_shape, double[:, :, :, ::1] gy, int stride):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = gy.shape[2], Wo = gy.shape[3]
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    gdiv_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gdiv = gdiv_arr
    cdef Py_ssize_t b, c, ho, wo, i, j, hi, wi
    cdef int cnt
    # scatter tap by tap in window order so both backends round alike
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        cnt = 0
                        for i in range(3):
                            hi = ho * stride - 1 + i
                            if 0 <= hi < H:
                                for j in range(3):
                                    wi = wo * stride - 1 + j
                                    if 0 <= wi < W:
                                        cnt = cnt + 1
                        gdiv[b, c, ho, wo] = gy[b, c, ho, wo] / cnt
        for i in range(3):
            for j in range(3):
                for b in range(B):
                    for c in range(C):
                        for ho in range(Ho):
                            hi = ho * stride - 1 + i
                            if hi < 0 or hi >= H:
                                continue
                            for wo in range(Wo):
                                wi = wo * stride - 1 + j
                                if wi < 0 or wi >= W:
                                    continue
                                gx[b, c, hi, wi] += gdiv[b, c, ho, wo]
    return gx_arr
