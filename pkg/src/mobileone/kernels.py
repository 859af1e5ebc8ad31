"""Convolution kernel dispatch.

Two interchangeable backends implement the raw convolution arithmetic:

* ``compiled`` - Cython extension (:mod:`mobileone._convkernels`), direct
  convolution parallelised over disjoint output planes.
* ``numpy`` - pure-numpy tap loop (:mod:`mobileone._convkernels_np`).

The compiled backend is preferred when the extension imported cleanly.
``MOBILEONE_KERNELS=numpy|compiled`` overrides the default at process
start, and :func:`use_backend` switches at runtime (handy for the
backend-comparison benchmark).  Each backend is deterministic: the
compiled one assigns every (image, channel) output plane to exactly one
thread, so ``MOBILEONE_THREADS`` changes speed, never results.

All public entry points validate shapes and raise :class:`ShapeError`
naming the offending dimension, so the backends themselves can assume
clean inputs.
"""

import os

import numpy as np

from . import _convkernels_np as _numpy_impl

try:
    from . import _convkernels as _compiled_impl
except ImportError:
    _compiled_impl = None


class ShapeError(ValueError):
    """An array dimension does not satisfy an operation's contract."""


_SUPPORTED_DTYPES = (np.float32, np.float64)


def _thread_default():
    raw = os.environ.get("MOBILEONE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = min(4, os.cpu_count() or 1)
    return n


_num_threads = _thread_default()


def set_num_threads(n):
    """Set the worker count for the compiled backend (results unchanged)."""
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _num_threads = int(n)


def num_threads():
    return _num_threads


def available_backends():
    names = ["numpy"]
    if _compiled_impl is not None:
        names.insert(0, "compiled")
    return tuple(names)


def _resolve(name):
    if name == "numpy":
        return _numpy_impl
    if name == "compiled":
        if _compiled_impl is None:
            raise RuntimeError(
                "compiled kernels are not available in this install; "
                "rebuild with the Cython extension or use the numpy backend"
            )
        return _compiled_impl
    raise ValueError(f"unknown kernel backend {name!r}; expected 'compiled' or 'numpy'")


def _default_backend():
    env = os.environ.get("MOBILEONE_KERNELS", "").strip().lower()
    if env:
        return env
    return "compiled" if _compiled_impl is not None else "numpy"


_active = _resolve(_default_backend())


def use_backend(name):
    """Switch the process-wide kernel backend ('compiled' or 'numpy')."""
    global _active
    _active = _resolve(name)


def active_backend():
    return "compiled" if _active is _compiled_impl else "numpy"


def _check_tensor4(name, a):
    if not isinstance(a, np.ndarray) or a.ndim != 4:
        raise ShapeError(f"{name} must be a 4-d array, got {getattr(a, 'shape', None)}")
    if a.dtype.type not in _SUPPORTED_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {a.dtype}")


def _as_contiguous(a):
    return np.ascontiguousarray(a)


def conv_output_extent(size, kernel, stride, padding):
    """Spatial output extent of a convolution along one axis."""
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"input extent {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} leaves no output positions"
        )
    return out


def check_conv_args(x, w, b, stride, padding, groups):
    """Validate a conv call; returns (out_h, out_w)."""
    _check_tensor4("input", x)
    _check_tensor4("weight", w)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    n, c_in, in_h, in_w = x.shape
    c_out, cpg_in, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(
            f"groups={groups} must divide both input channels {c_in} "
            f"and output channels {c_out}"
        )
    if cpg_in != c_in // groups:
        raise ShapeError(
            f"weight expects {cpg_in} channels per group but input provides "
            f"{c_in // groups} ({c_in} channels / {groups} groups)"
        )
    if b.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {b.shape}")
    if b.dtype != x.dtype or w.dtype != x.dtype:
        raise ShapeError(
            f"dtype mismatch: input {x.dtype}, weight {w.dtype}, bias {b.dtype}"
        )
    return (
        conv_output_extent(in_h, kh, stride, padding),
        conv_output_extent(in_w, kw, stride, padding),
    )


def conv2d_forward(x, w, b, stride=1, padding=0, groups=1):
    """2-d cross-correlation with bias, NCHW layout."""
    check_conv_args(x, w, b, stride, padding, groups)
    x, w, b = _as_contiguous(x), _as_contiguous(w), _as_contiguous(b)
    if _active is _compiled_impl:
        return _active.conv2d_fwd(x, w, b, stride, padding, groups, _num_threads)
    return _active.conv2d_fwd(x, w, b, stride, padding, groups)


def conv2d_backward(x, w, gy, stride=1, padding=0, groups=1):
    """Gradients of a conv2d_forward call.

    Returns ``(gx, gw, gb)`` for upstream gradient ``gy``.
    """
    _check_tensor4("output gradient", gy)
    out_h, out_w = check_conv_args(x, w, np.zeros(w.shape[0], x.dtype), stride, padding, groups)
    if gy.shape != (x.shape[0], w.shape[0], out_h, out_w):
        raise ShapeError(
            f"output gradient shape {gy.shape} does not match forward output "
            f"{(x.shape[0], w.shape[0], out_h, out_w)}"
        )
    if gy.dtype != x.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype}, output gradient {gy.dtype}")
    x, w, gy = _as_contiguous(x), _as_contiguous(w), _as_contiguous(gy)
    in_h, in_w = x.shape[2], x.shape[3]
    kernel = w.shape[2]
    if _active is _compiled_impl:
        gx = _active.conv2d_bwd_input(
            w, gy, stride, padding, groups, in_h, in_w, _num_threads
        )
        gw = _active.conv2d_bwd_weight(
            x, gy, stride, padding, groups, kernel, _num_threads
        )
    else:
        gx = _active.conv2d_bwd_input(w, gy, stride, padding, groups, in_h, in_w)
        gw = _active.conv2d_bwd_weight(x, gy, stride, padding, groups, kernel)
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb
