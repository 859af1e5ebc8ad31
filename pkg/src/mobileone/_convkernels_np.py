"""Pure-numpy convolution kernels.

Fallback backend used when the compiled extension is unavailable.  Each
function mirrors the signature of its compiled twin in ``_convkernels.pyx``
and assumes inputs were already validated by :mod:`mobileone.kernels`:
C-contiguous NCHW arrays, float32 or float64, consistent shapes.

The implementation walks the K*K kernel taps and accumulates one strided
slice per tap, so the heavy lifting stays inside numpy.  Grouped
convolutions fold the group axis into an einsum; depthwise gets a cheaper
broadcast path because it is the dominant case in this codebase.
"""

import numpy as np


def _out_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _tap_view(xp, kh, kw, out_h, out_w, stride):
    """Strided view of the padded input seen by kernel tap (kh, kw)."""
    return xp[
        :,
        :,
        kh : kh + (out_h - 1) * stride + 1 : stride,
        kw : kw + (out_w - 1) * stride + 1 : stride,
    ]


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_fwd(x, w, b, stride, padding, groups):
    n, c_in, in_h, in_w = x.shape
    c_out, cpg_in, kernel, _ = w.shape
    out_h = _out_extent(in_h, kernel, stride, padding)
    out_w = _out_extent(in_w, kernel, stride, padding)
    depthwise = groups == c_in and c_out == c_in and cpg_in == 1

    xp = _pad_spatial(x, padding)
    y = np.empty((n, c_out, out_h, out_w), dtype=x.dtype)
    y[...] = b.reshape(1, -1, 1, 1)
    for kh in range(kernel):
        for kw in range(kernel):
            xv = _tap_view(xp, kh, kw, out_h, out_w, stride)
            wk = w[:, :, kh, kw]
            if groups == 1:
                y += np.einsum("nihw,oi->nohw", xv, wk, optimize=True)
            elif depthwise:
                y += xv * wk[:, 0].reshape(1, -1, 1, 1)
            else:
                xg = xv.reshape(n, groups, cpg_in, out_h, out_w)
                wg = wk.reshape(groups, -1, cpg_in)
                y += np.einsum("ngihw,goi->ngohw", xg, wg, optimize=True).reshape(
                    n, c_out, out_h, out_w
                )
    return y


def conv2d_bwd_input(w, gy, stride, padding, groups, in_h, in_w):
    n, c_out, out_h, out_w = gy.shape
    _, cpg_in, kernel, _ = w.shape
    c_in = cpg_in * groups
    depthwise = groups == c_in and c_out == c_in and cpg_in == 1

    gxp = np.zeros((n, c_in, in_h + 2 * padding, in_w + 2 * padding), dtype=gy.dtype)
    for kh in range(kernel):
        for kw in range(kernel):
            wk = w[:, :, kh, kw]
            if groups == 1:
                gk = np.einsum("nohw,oi->nihw", gy, wk, optimize=True)
            elif depthwise:
                gk = gy * wk[:, 0].reshape(1, -1, 1, 1)
            else:
                gg = gy.reshape(n, groups, -1, out_h, out_w)
                wg = wk.reshape(groups, -1, cpg_in)
                gk = np.einsum("ngohw,goi->ngihw", gg, wg, optimize=True).reshape(
                    n, c_in, out_h, out_w
                )
            # Distinct output positions touch distinct strided slots for a
            # fixed tap, so += never aliases within one iteration.
            _tap_view(gxp, kh, kw, out_h, out_w, stride)[...] += gk
    if padding == 0:
        return gxp
    return np.ascontiguousarray(
        gxp[:, :, padding : padding + in_h, padding : padding + in_w]
    )


def conv2d_bwd_weight(x, gy, stride, padding, groups, kernel):
    n, c_in, _, _ = x.shape
    _, c_out, out_h, out_w = gy.shape
    cpg_in = c_in // groups
    depthwise = groups == c_in and c_out == c_in and cpg_in == 1

    xp = _pad_spatial(x, padding)
    gw = np.empty((c_out, cpg_in, kernel, kernel), dtype=x.dtype)
    for kh in range(kernel):
        for kw in range(kernel):
            xv = _tap_view(xp, kh, kw, out_h, out_w, stride)
            if groups == 1:
                gw[:, :, kh, kw] = np.einsum("nohw,nihw->oi", gy, xv, optimize=True)
            elif depthwise:
                gw[:, 0, kh, kw] = (gy * xv).sum(axis=(0, 2, 3))
            else:
                gg = gy.reshape(n, groups, -1, out_h, out_w)
                xg = xv.reshape(n, groups, cpg_in, out_h, out_w)
                gw[:, :, kh, kw] = np.einsum(
                    "ngohw,ngihw->goi", gg, xg, optimize=True
                ).reshape(c_out, cpg_in)
    return gw
