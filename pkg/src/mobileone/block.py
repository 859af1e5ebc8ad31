"""Reparameterizable building blocks.

A :class:`TrainBlock` stacks one or two :class:`RepStage` units.  The
separable form used almost everywhere is a depthwise stage (3x3, grouped
per channel) followed by a pointwise stage (1x1); the network stem is a
single full convolution stage.  Each stage sums several parallel branches
at train time:

* ``k`` replicated conv+BN branches sharing one geometry,
* an optional 1x1 conv+BN "scale" branch (only when the main kernel is
  larger than 1x1),
* an optional identity path that is just a BN (only at stride 1 with
  matching channel counts; anything else is rejected at construction).

After each stage the block applies its activation; ``se_relu`` inserts a
squeeze-excite gate before the ReLU.  At inference the whole stage
collapses into the single :class:`ConvSpec` stored by
:class:`InferenceBlock` (see :mod:`mobileone.reparam`).
"""

from dataclasses import dataclass

import numpy as np

from .ops import (
    BNParams,
    ConvSpec,
    SEParams,
    ShapeError,
    batchnorm_infer,
    batchnorm_train,
    conv2d,
    relu,
    se_forward,
)

MAX_BRANCHES = 5

_ACTIVATION_CHOICES = ("relu", "se_relu")


@dataclass(frozen=True)
class BranchConfig:
    """Branch layout for one reparameterizable stage."""

    k: int
    kernel: int = 3
    has_scale_branch: bool = True
    has_skip_bn: bool = True

    def __post_init__(self):
        if not 1 <= self.k <= MAX_BRANCHES:
            raise ShapeError(
                f"branch count k must be in [1, {MAX_BRANCHES}], got {self.k}"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(
                f"stage kernel must be odd and >= 1, got {self.kernel}"
            )
        if self.has_scale_branch and self.kernel == 1:
            raise ShapeError(
                "a scale branch on a 1x1 stage would duplicate a main branch"
            )


@dataclass
class RepStage:
    """One conv stage as a sum of parallel branches."""

    branches: list  # [(ConvSpec, BNParams)], all sharing one geometry
    scale: tuple | None = None  # (ConvSpec, BNParams), 1x1
    skip: BNParams | None = None

    def __post_init__(self):
        if not self.branches:
            raise ShapeError("a stage needs at least one conv branch")
        head = self.branches[0][0]
        for conv, bn in self.branches:
            same = (
                conv.weight.shape == head.weight.shape
                and conv.stride == head.stride
                and conv.padding == head.padding
                and conv.groups == head.groups
            )
            if not same:
                raise ShapeError("replicated branches must share one geometry")
            if bn.channels != conv.c_out:
                raise ShapeError(
                    f"branch batchnorm covers {bn.channels} channels, "
                    f"conv emits {conv.c_out}"
                )
        if head.padding != head.kernel // 2:
            raise ShapeError(
                f"stage convs must keep spatial alignment (padding "
                f"{head.kernel // 2} for kernel {head.kernel}), got {head.padding}"
            )
        if self.scale is not None:
            sconv, sbn = self.scale
            if sconv.kernel != 1 or sconv.padding != 0:
                raise ShapeError("scale branch must be an unpadded 1x1 conv")
            if sconv.stride != head.stride or sconv.groups != head.groups:
                raise ShapeError(
                    "scale branch must match the main branches' stride and groups"
                )
            if sconv.c_out != head.c_out or sconv.c_in != head.c_in:
                raise ShapeError("scale branch must match the stage channel counts")
            if sbn.channels != sconv.c_out:
                raise ShapeError("scale batchnorm channel count mismatch")
        if self.skip is not None:
            if head.stride != 1:
                raise ShapeError(
                    "identity skip is only defined at stride 1; a strided stage "
                    "cannot carry one"
                )
            if head.c_in != head.c_out:
                raise ShapeError(
                    f"identity skip needs matching channel counts, got "
                    f"{head.c_in} -> {head.c_out}"
                )
            if self.skip.channels != head.c_out:
                raise ShapeError("skip batchnorm channel count mismatch")

    @property
    def c_in(self):
        return self.branches[0][0].c_in

    @property
    def c_out(self):
        return self.branches[0][0].c_out

    @property
    def stride(self):
        return self.branches[0][0].stride

    @property
    def groups(self):
        return self.branches[0][0].groups

    @property
    def kernel(self):
        return self.branches[0][0].kernel

    def forward(self, x, mode="eval", bn_momentum=0.1):
        y, _ = self.forward_cached(x, mode, keep=False, bn_momentum=bn_momentum)
        return y

    def forward_cached(self, x, mode="eval", keep=True, bn_momentum=0.1):
        """Sum all branches; in train mode this advances running BN stats.

        ``bn_momentum=1.0`` adopts the batch statistics outright, which is
        how a randomly initialised block gets calibrated before folding.
        Returns ``(y, cache)`` where cache carries what the adjoint pass
        needs (or None when ``keep`` is false or mode is eval).
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        total = None
        branch_caches = []
        for i, (conv, bn) in enumerate(self.branches):
            z = conv2d(x, conv)
            if mode == "train":
                z, bn_new, bn_cache = batchnorm_train(z, bn, bn_momentum)
                self.branches[i] = (conv, bn_new)
                branch_caches.append(bn_cache)
            else:
                z = batchnorm_infer(z, bn)
            total = z if total is None else total + z
        scale_cache = None
        if self.scale is not None:
            conv, bn = self.scale
            z = conv2d(x, conv)
            if mode == "train":
                z, bn_new, scale_cache = batchnorm_train(z, bn, bn_momentum)
                self.scale = (conv, bn_new)
            else:
                z = batchnorm_infer(z, bn)
            total += z
        skip_cache = None
        if self.skip is not None:
            if mode == "train":
                z, bn_new, skip_cache = batchnorm_train(x, self.skip, bn_momentum)
                self.skip = bn_new
            else:
                z = batchnorm_infer(x, self.skip)
            total += z
        cache = (x, branch_caches, scale_cache, skip_cache) if keep else None
        return total, cache

    def named_tensors(self):
        for i, (conv, bn) in enumerate(self.branches):
            yield f"b{i}.conv.weight", conv.weight
            yield f"b{i}.conv.bias", conv.bias
            yield from _bn_tensors(f"b{i}.bn", bn)
        if self.scale is not None:
            conv, bn = self.scale
            yield "scale.conv.weight", conv.weight
            yield "scale.conv.bias", conv.bias
            yield from _bn_tensors("scale.bn", bn)
        if self.skip is not None:
            yield from _bn_tensors("skip", self.skip)

    def named_params(self):
        """Trainable tensors only.

        Conv biases stay zero under a following batchnorm (the
        normalisation cancels any constant channel shift, so their exact
        gradient is zero); they are excluded rather than carried as dead
        weight.  Running stats are state, not parameters.
        """
        for i, (conv, bn) in enumerate(self.branches):
            yield f"b{i}.conv.weight", conv.weight
            yield f"b{i}.bn.gamma", bn.gamma
            yield f"b{i}.bn.beta", bn.beta
        if self.scale is not None:
            conv, bn = self.scale
            yield "scale.conv.weight", conv.weight
            yield "scale.bn.gamma", bn.gamma
            yield "scale.bn.beta", bn.beta
        if self.skip is not None:
            yield "skip.gamma", self.skip.gamma
            yield "skip.beta", self.skip.beta


def _bn_tensors(prefix, bn):
    yield f"{prefix}.mu", bn.mu
    yield f"{prefix}.sigma", bn.sigma
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta


def _se_tensors(prefix, se):
    yield f"{prefix}.reduce.weight", se.reduce.weight
    yield f"{prefix}.reduce.bias", se.reduce.bias
    yield f"{prefix}.expand.weight", se.expand.weight
    yield f"{prefix}.expand.bias", se.expand.bias


def _check_block_act(stages, se, activation):
    if activation not in _ACTIVATION_CHOICES:
        raise ShapeError(
            f"block activation must be one of {_ACTIVATION_CHOICES}, got {activation!r}"
        )
    if len(se) != len(stages):
        raise ShapeError("need one squeeze-excite slot per stage (None to omit)")
    for gate in se:
        if activation == "se_relu" and gate is None:
            raise ShapeError("se_relu activation requires a gate on every stage")
        if activation == "relu" and gate is not None:
            raise ShapeError("plain relu blocks must not carry squeeze-excite gates")


@dataclass
class TrainBlock:
    """Multi-branch block; one stage (full conv) or two (depthwise+pointwise)."""

    stages: list  # [RepStage]
    se: list  # [SEParams | None], aligned with stages
    activation: str = "relu"

    def __post_init__(self):
        if not 1 <= len(self.stages) <= 2:
            raise ShapeError(f"a block has 1 or 2 stages, got {len(self.stages)}")
        _check_block_act(self.stages, self.se, self.activation)
        for stage, gate in zip(self.stages, self.se):
            if gate is not None and gate.channels != stage.c_out:
                raise ShapeError(
                    f"squeeze-excite covers {gate.channels} channels, stage "
                    f"emits {stage.c_out}"
                )

    @property
    def c_in(self):
        return self.stages[0].c_in

    @property
    def c_out(self):
        return self.stages[-1].c_out

    @property
    def stride(self):
        return self.stages[0].stride

    @property
    def dw(self):
        if len(self.stages) != 2:
            raise AttributeError("single-stage block has no depthwise stage")
        return self.stages[0]

    @property
    def pw(self):
        if len(self.stages) != 2:
            raise AttributeError("single-stage block has no pointwise stage")
        return self.stages[1]

    def forward(self, x, mode="eval", bn_momentum=0.1):
        for stage, gate in zip(self.stages, self.se):
            x, _ = stage.forward_cached(x, mode, keep=False, bn_momentum=bn_momentum)
            if gate is not None:
                x, _ = se_forward(x, gate)
            x = relu(x)
        return x

    def forward_cached(self, x, mode="train", bn_momentum=0.1):
        """Forward keeping per-stage caches for the adjoint pass."""
        caches = []
        for stage, gate in zip(self.stages, self.se):
            x, stage_cache = stage.forward_cached(x, mode, keep=True, bn_momentum=bn_momentum)
            se_cache = None
            if gate is not None:
                x, se_cache = se_forward(x, gate)
            pre_act = x
            x = relu(x)
            caches.append((stage_cache, se_cache, pre_act))
        return x, caches

    def named_tensors(self):
        for j, (stage, gate) in enumerate(zip(self.stages, self.se)):
            for name, arr in stage.named_tensors():
                yield f"s{j}.{name}", arr
            if gate is not None:
                yield from _se_tensors(f"s{j}.se", gate)

    def named_params(self):
        for j, (stage, gate) in enumerate(zip(self.stages, self.se)):
            for name, arr in stage.named_params():
                yield f"s{j}.{name}", arr
            if gate is not None:
                yield from _se_tensors(f"s{j}.se", gate)


@dataclass
class InferenceBlock:
    """Folded block: one plain conv per stage, no branches, no batchnorm."""

    stages: list  # [ConvSpec]
    se: list  # [SEParams | None]
    activation: str = "relu"

    def __post_init__(self):
        if not 1 <= len(self.stages) <= 2:
            raise ShapeError(f"a block has 1 or 2 stages, got {len(self.stages)}")
        _check_block_act(self.stages, self.se, self.activation)

    @property
    def c_in(self):
        return self.stages[0].c_in

    @property
    def c_out(self):
        return self.stages[-1].c_out

    @property
    def stride(self):
        return self.stages[0].stride

    def forward(self, x, mode="eval"):
        if mode != "eval":
            raise ValueError("a folded block only supports eval mode")
        for conv, gate in zip(self.stages, self.se):
            x = conv2d(x, conv)
            if gate is not None:
                x, _ = se_forward(x, gate)
            x = relu(x)
        return x

    def named_tensors(self):
        for j, (conv, gate) in enumerate(zip(self.stages, self.se)):
            yield f"s{j}.conv.weight", conv.weight
            yield f"s{j}.conv.bias", conv.bias
            if gate is not None:
                yield from _se_tensors(f"s{j}.se", gate)

    def named_params(self):
        return iter(())


# ---------------------------------------------------------------------------
# Constructors


def _he_weight(rng, shape, groups, dtype):
    c_out, _, k, _ = shape
    fan_out = (c_out // groups) * k * k
    std = np.sqrt(2.0 / fan_out)
    return (rng.standard_normal(shape) * std).astype(dtype)


def _fresh_bn(channels, dtype, eps=1e-5):
    return BNParams(
        mu=np.zeros(channels, dtype),
        sigma=np.ones(channels, dtype),
        gamma=np.ones(channels, dtype),
        beta=np.zeros(channels, dtype),
        eps=eps,
    )


def _conv_branch(rng, c_in, c_out, kernel, stride, padding, groups, dtype):
    w = _he_weight(rng, (c_out, c_in // groups, kernel, kernel), groups, dtype)
    conv = ConvSpec(
        weight=w,
        bias=np.zeros(c_out, dtype),
        stride=stride,
        padding=padding,
        groups=groups,
    )
    return conv, _fresh_bn(c_out, dtype)


def make_stage(rng, c_in, c_out, stride, groups, cfg, dtype=np.float32):
    """Build one randomly initialised :class:`RepStage` from a config."""
    if c_in % groups or c_out % groups:
        raise ShapeError(
            f"groups={groups} must divide channel counts {c_in} -> {c_out}"
        )
    branches = [
        _conv_branch(rng, c_in, c_out, cfg.kernel, stride, cfg.kernel // 2, groups, dtype)
        for _ in range(cfg.k)
    ]
    scale = None
    if cfg.has_scale_branch:
        scale = _conv_branch(rng, c_in, c_out, 1, stride, 0, groups, dtype)
    skip = _fresh_bn(c_out, dtype) if cfg.has_skip_bn else None
    return RepStage(branches=branches, scale=scale, skip=skip)


def make_se(rng, channels, ratio, dtype=np.float32):
    hidden = max(1, channels // ratio)
    reduce = ConvSpec(
        weight=_he_weight(rng, (hidden, channels, 1, 1), 1, dtype),
        bias=np.zeros(hidden, dtype),
    )
    expand = ConvSpec(
        weight=_he_weight(rng, (channels, hidden, 1, 1), 1, dtype),
        bias=np.zeros(channels, dtype),
    )
    return SEParams(reduce=reduce, expand=expand, ratio=ratio)


def separable_train_block(
    rng,
    c_in,
    c_out,
    stride,
    k,
    activation="relu",
    use_scale=True,
    use_skip=True,
    se_ratio=16,
    dtype=np.float32,
):
    """Depthwise 3x3 stage + pointwise 1x1 stage with branch replication.

    ``use_skip`` requests identity paths wherever they are legal: the
    depthwise stage at stride 1, the pointwise stage when channel counts
    match.
    """
    dw_cfg = BranchConfig(
        k=k,
        kernel=3,
        has_scale_branch=use_scale,
        has_skip_bn=use_skip and stride == 1,
    )
    pw_cfg = BranchConfig(
        k=k,
        kernel=1,
        has_scale_branch=False,
        has_skip_bn=use_skip and c_in == c_out,
    )
    dw = make_stage(rng, c_in, c_in, stride, c_in, dw_cfg, dtype)
    pw = make_stage(rng, c_in, c_out, 1, 1, pw_cfg, dtype)
    if activation == "se_relu":
        se = [make_se(rng, c_in, se_ratio, dtype), make_se(rng, c_out, se_ratio, dtype)]
    else:
        se = [None, None]
    return TrainBlock(stages=[dw, pw], se=se, activation=activation)


def fullconv_train_block(
    rng, c_in, c_out, stride, k, activation="relu", dtype=np.float32, use_scale=True
):
    """Single dense 3x3 stage (the network stem): scale branch, no skip."""
    cfg = BranchConfig(k=k, kernel=3, has_scale_branch=use_scale, has_skip_bn=False)
    stage = make_stage(rng, c_in, c_out, stride, 1, cfg, dtype)
    se = [make_se(rng, c_out, 16, dtype)] if activation == "se_relu" else [None]
    return TrainBlock(stages=[stage], se=se, activation=activation)
