"""Exact branch folding: collapse train-time stages into single convs.

Because convolution and the inference-time batchnorm are both affine in
the input, every train-time stage (k replicated conv+BN branches, an
optional 1x1 scale branch, an optional BN-only identity path) equals one
convolution whose weights are built here:

* :func:`fold_bn` absorbs a batchnorm into the preceding conv,
* :func:`identity_as_conv` writes the identity map as a one-hot kernel,
* :func:`pad_kernel` centres a small kernel inside a larger one,
* :func:`merge_stage` folds every branch and sums them.

All folding arithmetic runs in float64 and is cast to the model dtype at
the end, so the float32 path loses only one rounding step.  The match is
exact up to that rounding: the test suite drives random blocks in both
precisions and compares against the unfolded forward.
"""

from dataclasses import replace

import numpy as np

from .block import InferenceBlock, TrainBlock
from .ops import ConvSpec, SEParams, ShapeError
from .zoo import Model


class ReparamError(ValueError):
    """A model cannot be folded as requested."""


def _check_bn_stats(bn, where):
    ok = (
        np.all(np.isfinite(bn.mu))
        and np.all(np.isfinite(bn.sigma))
        and np.all(bn.sigma > 0)
        and np.all(np.isfinite(bn.gamma))
        and np.all(np.isfinite(bn.beta))
    )
    if not ok:
        raise ReparamError(
            f"batchnorm statistics in {where} are not usable (non-finite or "
            f"non-positive sigma); train or calibrate the model before folding"
        )


def fold_bn(conv, bn, dtype=None):
    """Fold inference-mode batchnorm into the preceding convolution.

    Returns a :class:`ConvSpec` computing ``bn(conv(x))`` exactly:
    per-channel scale ``gamma / sqrt(sigma^2 + eps)`` multiplies the
    kernel, and the bias becomes ``(bias - mu) * scale + beta``.
    """
    if bn.channels != conv.c_out:
        raise ShapeError(
            f"batchnorm covers {bn.channels} channels, conv emits {conv.c_out}"
        )
    _check_bn_stats(bn, "fold_bn")
    out_dtype = conv.weight.dtype if dtype is None else np.dtype(dtype)
    scale = bn.gamma.astype(np.float64) / np.sqrt(
        bn.sigma.astype(np.float64) ** 2 + bn.eps
    )
    w = conv.weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    b = (conv.bias.astype(np.float64) - bn.mu.astype(np.float64)) * scale + bn.beta.astype(
        np.float64
    )
    return replace(conv, weight=w.astype(out_dtype), bias=b.astype(out_dtype))


def identity_as_conv(channels, groups, kernel, dtype=np.float64):
    """The identity map written as a grouped conv kernel.

    Output channel ``c`` reads input channel ``c`` through a one at the
    kernel centre; every other tap is zero.  Needs an odd kernel (an even
    one has no centre tap to carry the identity).
    """
    if kernel % 2 == 0:
        raise ShapeError(
            f"identity needs an odd kernel (no centre tap at kernel={kernel})"
        )
    if channels % groups:
        raise ShapeError(f"groups={groups} must divide channels={channels}")
    cpg = channels // groups
    w = np.zeros((channels, cpg, kernel, kernel), dtype)
    centre = kernel // 2
    for co in range(channels):
        w[co, co % cpg, centre, centre] = 1.0
    return ConvSpec(
        weight=w,
        bias=np.zeros(channels, dtype),
        stride=1,
        padding=kernel // 2,
        groups=groups,
    )


def pad_kernel(weight, target):
    """Zero-pad a square odd kernel to a larger odd size, keeping the centre.

    A 1x1 kernel padded to 3x3 (then run with padding 1) computes exactly
    what the 1x1 did with padding 0, which is what lets the scale branch
    join the main-branch sum.
    """
    k = weight.shape[-1]
    if weight.shape[-2] != k:
        raise ShapeError(f"kernel must be square, got {weight.shape[-2]}x{k}")
    if k % 2 == 0 or target % 2 == 0:
        raise ShapeError(
            f"kernel sizes must both be odd to share a centre, got {k} -> {target}"
        )
    if target < k:
        raise ShapeError(f"cannot shrink a kernel ({k} -> {target})")
    if target == k:
        return weight
    pad = (target - k) // 2
    return np.pad(weight, [(0, 0)] * (weight.ndim - 2) + [(pad, pad), (pad, pad)])


def merge_stage(stage):
    """Collapse one multi-branch stage into a single :class:`ConvSpec`.

    Folds each branch's batchnorm, lifts the 1x1 scale branch and the
    identity path to the main kernel size, and sums: replicated branches
    in list order, then scale, then skip.
    """
    head = stage.branches[0][0]
    dtype = head.weight.dtype
    kernel = head.kernel
    w = np.zeros(head.weight.shape, np.float64)
    b = np.zeros(head.c_out, np.float64)
    for conv, bn in stage.branches:
        folded = fold_bn(conv, bn, np.float64)
        w += folded.weight
        b += folded.bias
    if stage.scale is not None:
        conv, bn = stage.scale
        folded = fold_bn(conv, bn, np.float64)
        w += pad_kernel(folded.weight, kernel)
        b += folded.bias
    if stage.skip is not None:
        ident = identity_as_conv(head.c_out, head.groups, kernel, np.float64)
        folded = fold_bn(ident, stage.skip, np.float64)
        w += folded.weight
        b += folded.bias
    return ConvSpec(
        weight=w.astype(dtype),
        bias=b.astype(dtype),
        stride=head.stride,
        padding=head.padding,
        groups=head.groups,
    )


def _copy_se(se):
    if se is None:
        return None
    return SEParams(
        reduce=replace(se.reduce, weight=se.reduce.weight.copy(), bias=se.reduce.bias.copy()),
        expand=replace(se.expand, weight=se.expand.weight.copy(), bias=se.expand.bias.copy()),
        ratio=se.ratio,
    )


def reparameterize_block(block):
    """Fold a :class:`TrainBlock` into an equivalent :class:`InferenceBlock`."""
    if isinstance(block, InferenceBlock):
        return block
    if not isinstance(block, TrainBlock):
        raise ReparamError(f"cannot fold layer type {type(block).__name__}")
    return InferenceBlock(
        stages=[merge_stage(stage) for stage in block.stages],
        se=[_copy_se(gate) for gate in block.se],
        activation=block.activation,
    )


def calibrate_model(model, x):
    """Adopt batch statistics for every batchnorm by one train-mode pass.

    Gives a randomly initialised (or freshly loaded) train-mode model
    running statistics that actually describe its activations, after
    which folding is well conditioned.  Returns the final activations.
    """
    for layer in model.layers:
        if isinstance(layer, TrainBlock):
            x = layer.forward(x, mode="train", bn_momentum=1.0)
        else:
            x = layer.forward(x, mode="eval")
    return x


def reparameterize_model(model):
    """Fold every block of a model; idempotent on already-folded models."""
    if model.mode == "inference":
        return model
    layers = []
    for layer in model.layers:
        if isinstance(layer, TrainBlock):
            layers.append(reparameterize_block(layer))
        elif isinstance(layer, InferenceBlock):
            layers.append(layer)
        elif hasattr(layer, "weight"):
            layers.append(replace(layer, weight=layer.weight.copy(), bias=layer.bias.copy()))
        else:
            layers.append(layer)
    return Model(
        layers=layers,
        name=model.name,
        mode="inference",
        input_channels=model.input_channels,
        arch=model.arch,
    )
