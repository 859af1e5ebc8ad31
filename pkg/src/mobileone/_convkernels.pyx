# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled direct-convolution kernels.

Same contract as ``_convkernels_np``: validated C-contiguous NCHW inputs,
float32 or float64.  Work is parallelised over disjoint output planes
(one (image, channel) plane per task), so results are bit-identical for
any thread count.  Weight gradients accumulate in double precision
regardless of the tensor dtype.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange


ctypedef fused real:
    float
    double


def conv2d_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
               int stride, int padding, int groups, int num_threads):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t in_h = x.shape[2], in_w = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], cpg_in = w.shape[1], kernel = w.shape[2]
    cdef Py_ssize_t out_h = (in_h + 2 * padding - kernel) // stride + 1
    cdef Py_ssize_t out_w = (in_w + 2 * padding - kernel) // stride + 1
    cdef Py_ssize_t cpg_out = c_out // groups

    if real is float:
        out_np = np.empty((n_img, c_out, out_h, out_w), dtype=np.float32)
    else:
        out_np = np.empty((n_img, c_out, out_h, out_w), dtype=np.float64)
    out_np[...] = np.asarray(b).reshape(1, -1, 1, 1)

    cdef real[:, :, :, ::1] y = out_np
    cdef Py_ssize_t idx, n, co, g, ci, ci_l, kh, kw, oh, ow, ih
    cdef Py_ssize_t ow_lo, ow_hi, hi_num, lo_num
    cdef Py_ssize_t ntasks = n_img * c_out
    cdef real wv
    cdef int nt = num_threads if num_threads > 0 else 1

    for idx in prange(ntasks, nogil=True, num_threads=nt, schedule='static'):
        n = idx // c_out
        co = idx % c_out
        g = co // cpg_out
        for ci_l in range(cpg_in):
            ci = g * cpg_in + ci_l
            for kh in range(kernel):
                for kw in range(kernel):
                    wv = w[co, ci_l, kh, kw]
                    lo_num = padding - kw
                    if lo_num <= 0:
                        ow_lo = 0
                    else:
                        ow_lo = (lo_num + stride - 1) // stride
                    hi_num = in_w - 1 + padding - kw
                    if hi_num < 0:
                        continue
                    ow_hi = hi_num // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    for oh in range(out_h):
                        ih = oh * stride - padding + kh
                        if ih < 0 or ih >= in_h:
                            continue
                        for ow in range(ow_lo, ow_hi):
                            y[n, co, oh, ow] = y[n, co, oh, ow] + wv * x[
                                n, ci, ih, ow * stride - padding + kw]
    return out_np


def conv2d_bwd_input(real[:, :, :, ::1] w, real[:, :, :, ::1] gy,
                     int stride, int padding, int groups,
                     Py_ssize_t in_h, Py_ssize_t in_w, int num_threads):
    cdef Py_ssize_t n_img = gy.shape[0], c_out = gy.shape[1]
    cdef Py_ssize_t out_h = gy.shape[2], out_w = gy.shape[3]
    cdef Py_ssize_t cpg_in = w.shape[1], kernel = w.shape[2]
    cdef Py_ssize_t c_in = cpg_in * groups
    cdef Py_ssize_t cpg_out = c_out // groups

    if real is float:
        gx_np = np.zeros((n_img, c_in, in_h, in_w), dtype=np.float32)
    else:
        gx_np = np.zeros((n_img, c_in, in_h, in_w), dtype=np.float64)

    cdef real[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t idx, n, ci, ci_l, g, co, co_l, kh, kw, oh, ow, ih
    cdef Py_ssize_t ow_lo, ow_hi, hi_num, lo_num
    cdef Py_ssize_t ntasks = n_img * c_in
    cdef real wv
    cdef int nt = num_threads if num_threads > 0 else 1

    for idx in prange(ntasks, nogil=True, num_threads=nt, schedule='static'):
        n = idx // c_in
        ci = idx % c_in
        g = ci // cpg_in
        ci_l = ci % cpg_in
        for co_l in range(cpg_out):
            co = g * cpg_out + co_l
            for kh in range(kernel):
                for kw in range(kernel):
                    wv = w[co, ci_l, kh, kw]
                    lo_num = padding - kw
                    if lo_num <= 0:
                        ow_lo = 0
                    else:
                        ow_lo = (lo_num + stride - 1) // stride
                    hi_num = in_w - 1 + padding - kw
                    if hi_num < 0:
                        continue
                    ow_hi = hi_num // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    for oh in range(out_h):
                        ih = oh * stride - padding + kh
                        if ih < 0 or ih >= in_h:
                            continue
                        for ow in range(ow_lo, ow_hi):
                            gx[n, ci, ih, ow * stride - padding + kw] = gx[
                                n, ci, ih, ow * stride - padding + kw
                            ] + wv * gy[n, co, oh, ow]
    return gx_np


def conv2d_bwd_weight(real[:, :, :, ::1] x, real[:, :, :, ::1] gy,
                      int stride, int padding, int groups,
                      Py_ssize_t kernel, int num_threads):
    cdef Py_ssize_t n_img = x.shape[0], c_in = x.shape[1]
    cdef Py_ssize_t in_h = x.shape[2], in_w = x.shape[3]
    cdef Py_ssize_t c_out = gy.shape[1]
    cdef Py_ssize_t out_h = gy.shape[2], out_w = gy.shape[3]
    cdef Py_ssize_t cpg_in = c_in // groups
    cdef Py_ssize_t cpg_out = c_out // groups

    if real is float:
        gw_np = np.zeros((c_out, cpg_in, kernel, kernel), dtype=np.float32)
    else:
        gw_np = np.zeros((c_out, cpg_in, kernel, kernel), dtype=np.float64)

    cdef real[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t co, g, ci, ci_l, kh, kw, n, oh, ow, ih
    cdef Py_ssize_t ow_lo, ow_hi, hi_num, lo_num
    cdef double acc
    cdef int nt = num_threads if num_threads > 0 else 1

    for co in prange(c_out, nogil=True, num_threads=nt, schedule='static'):
        g = co // cpg_out
        for ci_l in range(cpg_in):
            ci = g * cpg_in + ci_l
            for kh in range(kernel):
                for kw in range(kernel):
                    lo_num = padding - kw
                    if lo_num <= 0:
                        ow_lo = 0
                    else:
                        ow_lo = (lo_num + stride - 1) // stride
                    hi_num = in_w - 1 + padding - kw
                    if hi_num < 0:
                        continue
                    ow_hi = hi_num // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    acc = 0.0
                    for n in range(n_img):
                        for oh in range(out_h):
                            ih = oh * stride - padding + kh
                            if ih < 0 or ih >= in_h:
                                continue
                            for ow in range(ow_lo, ow_hi):
                                acc = acc + gy[n, co, oh, ow] * x[
                                    n, ci, ih, ow * stride - padding + kw]
                    gw[co, ci_l, kh, kw] = <real> acc
    return gw_np
