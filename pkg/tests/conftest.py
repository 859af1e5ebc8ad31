"""Reference implementations the tests check the package against.

Everything here is written the slow, obvious way (python loops and
definitional formulas) so it cannot share bugs with the package code.
"""

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0, groups=1):
    """Six-loop convolution, float64 accumulation. Tiny shapes only."""
    n, c_in, h, wid = x.shape
    c_out, cpg, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wid + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wid] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow), dtype=np.float64)
    cpg_out = c_out // groups
    for ni in range(n):
        for co in range(c_out):
            g = co // cpg_out
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cpg):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[ni, g * cpg + ci, oy * stride + ky, ox * stride + kx]
                                    * w[co, ci, ky, kx]
                                )
                    out[ni, co, oy, ox] = acc + b[co]
    return out


def central_diff(f, arr, idx, eps=1e-4):
    """Symmetric difference of scalar ``f()`` w.r.t. one entry of ``arr``."""
    old = arr[idx]
    arr[idx] = old + eps
    hi = f()
    arr[idx] = old - eps
    lo = f()
    arr[idx] = old
    return (hi - lo) / (2.0 * eps)


def rel_err(fd, g):
    return abs(fd - g) / max(abs(fd), abs(g), 1e-6)


def sample_indices(shape, count, rng):
    """Up to ``count`` distinct flat indices of an array, as nd tuples."""
    total = int(np.prod(shape))
    flat = rng.permutation(total)[: min(count, total)]
    return [np.unravel_index(i, shape) for i in flat]


def brute_midranks(values):
    """Definitional mid-ranks: mean 1-based sorted position among equals."""
    ordered = sorted(values)
    out = []
    for v in values:
        positions = [i + 1 for i, s in enumerate(ordered) if s == v]
        out.append(sum(positions) / len(positions))
    return out
