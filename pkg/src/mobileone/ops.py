"""Neural-net ops on NCHW numpy arrays, with hand-written adjoints.

Tensors are plain C-contiguous ``np.ndarray`` with shape (N, C, H, W):
row-major flat storage, float64 for verification paths and float32 for
speed paths.  Parameters live in small dataclasses (:class:`ConvSpec`,
:class:`BNParams`, :class:`SEParams`) that validate their own shapes.

Every op that participates in training has a matching ``*_backward``
returning exact reverse-mode gradients; these are checked against central
finite differences in the test suite.
"""

from dataclasses import dataclass, replace

import numpy as np

from .kernels import ShapeError, conv2d_backward, conv2d_forward

__all__ = [
    "ConvSpec",
    "BNParams",
    "SEParams",
    "ShapeError",
    "conv2d",
    "conv2d_backward",
    "batchnorm_infer",
    "batchnorm_train",
    "batchnorm_train_backward",
    "relu",
    "relu_backward",
    "gelu",
    "silu",
    "sigmoid",
    "se_forward",
    "se_backward",
    "global_avgpool",
    "global_avgpool_backward",
    "linear",
    "linear_backward",
    "check_tensor4",
    "ACTIVATIONS",
]


def check_tensor4(x, name="input"):
    """Require a float32/float64 NCHW array; returns it unchanged."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-d NCHW array, got {getattr(x, 'shape', None)}")
    if x.dtype.type not in (np.float32, np.float64):
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


@dataclass
class ConvSpec:
    """A convolution's parameters and geometry.

    weight has shape (c_out, c_in // groups, k, k); bias always exists
    (zero for convolutions that feed a batchnorm, where any constant
    shift is absorbed by the normalisation).
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"conv bias must have shape ({w.shape[0]},), got {self.bias.shape}"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1 or w.shape[0] % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide output channels {w.shape[0]}"
            )

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class BNParams:
    """Batchnorm state for one channel axis.

    ``sigma`` is the running standard deviation (not variance), kept
    strictly positive; normalisation divides by sqrt(sigma**2 + eps) so
    inference and folded-conv arithmetic agree exactly.
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.mu.shape
        for name in ("sigma", "gamma", "beta"):
            if getattr(self, name).shape != c:
                raise ShapeError(
                    f"batchnorm {name} shape {getattr(self, name).shape} != mu shape {c}"
                )
        if self.mu.ndim != 1:
            raise ShapeError(f"batchnorm parameters must be 1-d, got shape {c}")
        if self.eps <= 0:
            raise ShapeError(f"batchnorm eps must be > 0, got {self.eps}")
        if not np.all(np.isfinite(self.sigma)) or np.any(self.sigma <= 0):
            raise ShapeError("batchnorm running sigma must be finite and > 0")

    @property
    def channels(self):
        return self.mu.shape[0]


@dataclass
class SEParams:
    """Squeeze-and-excite gate: pool, reduce 1x1, ReLU, expand 1x1, sigmoid."""

    reduce: ConvSpec
    expand: ConvSpec
    ratio: int = 16

    def __post_init__(self):
        c = self.expand.c_out
        if self.reduce.c_in != c:
            raise ShapeError(
                f"squeeze-excite reduce expects {self.reduce.c_in} channels "
                f"but gate operates on {c}"
            )
        if self.reduce.c_out != self.expand.c_in:
            raise ShapeError(
                f"squeeze-excite bottleneck mismatch: reduce emits "
                f"{self.reduce.c_out}, expand consumes {self.expand.c_in}"
            )
        if self.reduce.kernel != 1 or self.expand.kernel != 1:
            raise ShapeError("squeeze-excite convolutions must be 1x1")

    @property
    def channels(self):
        return self.expand.c_out


def conv2d(x, spec):
    """Apply a :class:`ConvSpec` to an NCHW tensor."""
    check_tensor4(x)
    return conv2d_forward(x, spec.weight, spec.bias, spec.stride, spec.padding, spec.groups)


def _bn_scale_shift(bn, dtype):
    # Computed in float64 so inference and folded weights round the same way.
    scale = bn.gamma.astype(np.float64) / np.sqrt(bn.sigma.astype(np.float64) ** 2 + bn.eps)
    shift = bn.beta.astype(np.float64) - bn.mu.astype(np.float64) * scale
    return scale.astype(dtype), shift.astype(dtype)


def batchnorm_infer(x, bn):
    """Normalise with running statistics (frozen affine transform)."""
    check_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, batchnorm expects {bn.channels}"
        )
    scale, shift = _bn_scale_shift(bn, x.dtype)
    return x * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)


def batchnorm_train(x, bn, momentum=0.1):
    """Normalise with batch statistics and advance the running estimates.

    Normalisation uses the biased batch variance; the running variance is
    updated from the unbiased estimate, mirroring the usual framework
    convention.  Returns ``(y, updated_params, cache)`` where cache feeds
    :func:`batchnorm_train_backward`.  A batch with fewer than two
    elements per channel has no meaningful variance and raises.
    """
    check_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, batchnorm expects {bn.channels}"
        )
    if not 0.0 <= momentum <= 1.0:
        raise ShapeError(f"momentum must be in [0, 1], got {momentum}")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError(
            f"batchnorm needs at least 2 elements per channel to estimate "
            f"variance, got {n}"
        )
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    xc = x - mean.astype(x.dtype).reshape(1, -1, 1, 1)
    var = np.square(xc, dtype=x.dtype).mean(axis=(0, 2, 3), dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = xc * inv_std.astype(x.dtype).reshape(1, -1, 1, 1)
    y = xhat * bn.gamma.reshape(1, -1, 1, 1) + bn.beta.reshape(1, -1, 1, 1)

    var_unbiased = var * (n / (n - 1))
    new_mu = (1.0 - momentum) * bn.mu + momentum * mean.astype(bn.mu.dtype)
    new_var = (1.0 - momentum) * bn.sigma.astype(np.float64) ** 2 + momentum * var_unbiased
    new_sigma = np.sqrt(new_var).astype(bn.sigma.dtype)
    updated = replace(bn, mu=new_mu, sigma=new_sigma)
    cache = (xhat, inv_std.astype(x.dtype), bn.gamma)
    return y, updated, cache


def batchnorm_train_backward(gy, cache):
    """Gradients through batch-stat normalisation.

    Returns ``(gx, ggamma, gbeta)``.
    """
    xhat, inv_std, gamma = cache
    ggamma = (gy * xhat).sum(axis=(0, 2, 3))
    gbeta = gy.sum(axis=(0, 2, 3))
    n = gy.shape[0] * gy.shape[2] * gy.shape[3]
    mean_gy = gy.mean(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    mean_gy_xhat = (ggamma / n).reshape(1, -1, 1, 1)
    gx = (gamma * inv_std).reshape(1, -1, 1, 1) * (gy - mean_gy - xhat * mean_gy_xhat)
    return gx, ggamma, gbeta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(gy, x):
    return gy * (x > 0)


def sigmoid(x):
    # Split by sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Plain Python float so float32 inputs stay float32 under NEP 50 promotion.
_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    """tanh-approximation GELU (benchmark subject, no adjoint needed)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def silu(x):
    return x * sigmoid(x)


ACTIVATIONS = {"relu": relu, "gelu": gelu, "silu": silu}


def global_avgpool(x):
    """Spatial mean, keeping (N, C, 1, 1) layout."""
    check_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def global_avgpool_backward(gy, in_h, in_w):
    scale = np.asarray(1.0 / (in_h * in_w), dtype=gy.dtype)
    return np.broadcast_to(gy * scale, (gy.shape[0], gy.shape[1], in_h, in_w)).copy()


def se_forward(x, se):
    """Squeeze-and-excite: rescale channels by a learned global gate.

    Returns ``(y, cache)``; pass cache to :func:`se_backward`.
    """
    check_tensor4(x)
    if x.shape[1] != se.channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, squeeze-excite expects {se.channels}"
        )
    s = global_avgpool(x)
    r_pre = conv2d(s, se.reduce)
    r = relu(r_pre)
    e = conv2d(r, se.expand)
    g = sigmoid(e)
    y = x * g
    cache = (x, s, r_pre, r, g)
    return y, cache


def se_backward(gy, se, cache):
    """Gradients through a squeeze-excite gate.

    Returns ``(gx, grads)`` where grads holds ``reduce.weight``,
    ``reduce.bias``, ``expand.weight``, ``expand.bias``.
    """
    x, s, r_pre, r, g = cache
    in_h, in_w = x.shape[2], x.shape[3]
    gx = gy * g
    g_gate = (gy * x).sum(axis=(2, 3), keepdims=True)
    ge = g_gate * g * (1.0 - g)
    gr, gwe, gbe = conv2d_backward(r, se.expand.weight, ge, 1, 0, 1)
    gr_pre = relu_backward(gr, r_pre)
    gs, gwr, gbr = conv2d_backward(s, se.reduce.weight, gr_pre, 1, 0, 1)
    gx += gs / (in_h * in_w)
    grads = {
        "reduce.weight": gwr,
        "reduce.bias": gbr,
        "expand.weight": gwe,
        "expand.bias": gbe,
    }
    return gx, grads


def linear(x, weight, bias):
    """Affine map on flattened features: x (N, F) -> (N, classes)."""
    if x.ndim != 2:
        raise ShapeError(f"linear input must be 2-d, got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"linear weight shape {weight.shape} incompatible with input {x.shape}"
        )
    return x @ weight.T + bias


def linear_backward(gy, x, weight):
    gx = gy @ weight
    gw = gy.T @ x
    gb = gy.sum(axis=0)
    return gx, gw, gb
