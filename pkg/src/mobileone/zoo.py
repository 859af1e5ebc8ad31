"""Model zoo: variant tables, model assembly, parameter and MAC counts.

The family shares one skeleton: a dense 3x3 stem, five stages of
depthwise-separable blocks with per-stage width multipliers, then global
average pooling and a linear classifier.  ``variant_spec`` returns the
published configurations (s0..s4 and the micro sizes mu0..mu2);
``build_model`` turns any :class:`ArchSpec` into a runnable
:class:`Model` in either train or inference form.
"""

import json
from dataclasses import dataclass

import numpy as np

from .block import (
    InferenceBlock,
    _he_weight,
    fullconv_train_block,
    separable_train_block,
)
from .kernels import conv_output_extent
from .ops import ConvSpec, ShapeError, global_avgpool, linear

BASE_CHANNELS = (64, 64, 128, 256, 256, 512)
STAGE_STRIDES = (2, 2, 2, 2, 1, 2)


@dataclass(frozen=True)
class StageSpec:
    """One table row: how many blocks, at what width and stride."""

    blocks: int
    stride: int
    base_channels: int
    alpha: float
    k: int
    activation: str = "relu"

    def __post_init__(self):
        if self.blocks < 1:
            raise ShapeError(f"a stage needs at least one block, got {self.blocks}")
        if self.alpha <= 0:
            raise ShapeError(f"width multiplier must be positive, got {self.alpha}")

    @property
    def width(self):
        return int(round(self.base_channels * self.alpha))


@dataclass(frozen=True)
class ArchSpec:
    """A full architecture: six stages plus classifier width.

    The stem (first stage) is a single dense 3x3 block whose width is
    additionally capped at its base channel count, so aggressive stem
    multipliers widen later stages without inflating the most
    resolution-heavy layer.
    """

    name: str
    stages: tuple
    classes: int = 1000
    stem_cap: int = 64

    def __post_init__(self):
        if len(self.stages) < 2:
            raise ShapeError("an architecture needs a stem stage plus body stages")
        if self.stages[0].blocks != 1:
            raise ShapeError("the stem stage is a single block")
        if self.classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.classes}")

    def stage_width(self, i):
        w = self.stages[i].width
        if i == 0:
            w = min(self.stem_cap, w)
        return w

    @property
    def feature_dim(self):
        return self.stage_width(len(self.stages) - 1)

    def as_dict(self):
        return {
            "name": self.name,
            "classes": self.classes,
            "stem_cap": self.stem_cap,
            "stages": [
                {
                    "blocks": s.blocks,
                    "stride": s.stride,
                    "base_channels": s.base_channels,
                    "alpha": s.alpha,
                    "k": s.k,
                    "activation": s.activation,
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d):
        stages = tuple(StageSpec(**s) for s in d["stages"])
        return cls(
            name=d["name"],
            stages=stages,
            classes=d.get("classes", 1000),
            stem_cap=d.get("stem_cap", 64),
        )

    def to_json(self, indent=2):
        return json.dumps(self.as_dict(), indent=indent)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# Variant table: per-stage width multipliers, branch replication factor,
# block depths, and which stages get squeeze-excite gates.
_VARIANTS = {
    "s0": dict(alphas=(0.75, 0.75, 1.0, 1.0, 1.0, 2.0), k=4, depths=(1, 2, 8, 5, 5, 1), se=()),
    "s1": dict(alphas=(1.5, 1.5, 1.5, 2.0, 2.0, 2.5), k=1, depths=(1, 2, 8, 5, 5, 1), se=()),
    "s2": dict(alphas=(1.5, 1.5, 2.0, 2.5, 2.5, 4.0), k=1, depths=(1, 2, 8, 5, 5, 1), se=()),
    "s3": dict(alphas=(2.0, 2.0, 2.5, 3.0, 3.0, 4.0), k=1, depths=(1, 2, 8, 5, 5, 1), se=()),
    "s4": dict(alphas=(3.0, 3.0, 3.5, 3.5, 3.5, 4.0), k=1, depths=(1, 2, 8, 5, 5, 1), se=(4, 5)),
    "mu0": dict(alphas=(0.75, 0.75, 0.5, 0.5, 0.5, 0.75), k=3, depths=(1, 2, 4, 3, 3, 1), se=()),
    "mu1": dict(alphas=(0.75, 0.75, 0.75, 0.75, 0.75, 1.0), k=2, depths=(1, 2, 6, 4, 4, 1), se=()),
    "mu2": dict(alphas=(0.75, 0.75, 1.0, 1.0, 1.0, 1.0), k=2, depths=(1, 2, 6, 4, 4, 1), se=()),
}

VARIANT_NAMES = tuple(_VARIANTS)


def variant_spec(name, classes=1000):
    """Published architecture table entry for one variant name."""
    key = name.lower().replace("-", "").replace("_", "")
    if key not in _VARIANTS:
        raise KeyError(
            f"unknown variant {name!r}; expected one of {', '.join(VARIANT_NAMES)}"
        )
    v = _VARIANTS[key]
    stages = tuple(
        StageSpec(
            blocks=v["depths"][i],
            stride=STAGE_STRIDES[i],
            base_channels=BASE_CHANNELS[i],
            alpha=v["alphas"][i],
            k=v["k"],
            activation="se_relu" if i in v["se"] else "relu",
        )
        for i in range(6)
    )
    return ArchSpec(name=key, stages=stages, classes=classes)


@dataclass(frozen=True)
class InitPolicy:
    """Weight init: He-style convs, unit batchnorm, small-normal classifier."""

    seed: int = 0
    dtype: type = np.float32


@dataclass
class GlobalPoolFlatten:
    """Global average pool then flatten to (N, C)."""

    def forward(self, x, mode="eval"):
        return global_avgpool(x).reshape(x.shape[0], x.shape[1])

    def named_tensors(self):
        return iter(())

    def named_params(self):
        return iter(())


@dataclass
class LinearHead:
    weight: np.ndarray
    bias: np.ndarray

    def forward(self, x, mode="eval"):
        return linear(x, self.weight, self.bias)

    def named_tensors(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def named_params(self):
        yield "weight", self.weight
        yield "bias", self.bias


@dataclass
class Model:
    """A runnable layer stack plus identifying metadata."""

    layers: list
    name: str = "custom"
    mode: str = "train"
    input_channels: int = 3
    arch: ArchSpec | None = None

    def forward(self, x, mode=None):
        m = mode if mode is not None else ("train" if self.mode == "train" else "eval")
        for layer in self.layers:
            x = layer.forward(x, mode=m)
        return x

    def named_tensors(self):
        for i, layer in enumerate(self.layers):
            prefix = _layer_prefix(layer, i)
            for name, arr in layer.named_tensors():
                yield f"{prefix}.{name}", arr

    def named_params(self):
        for i, layer in enumerate(self.layers):
            prefix = _layer_prefix(layer, i)
            for name, arr in layer.named_params():
                yield f"{prefix}.{name}", arr


def _layer_prefix(layer, i):
    if isinstance(layer, LinearHead):
        return "head"
    return f"layers.{i:02d}"


def build_model(spec, mode="train", init=InitPolicy()):
    """Assemble a model from an :class:`ArchSpec`.

    Train mode produces multi-branch blocks; inference mode produces the
    folded single-conv form directly (randomly initialised, useful for
    latency work where trained values are irrelevant).
    """
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    rng = np.random.default_rng(init.seed)
    dtype = np.dtype(init.dtype).type
    layers = []
    c_prev = 3
    for i, stage in enumerate(spec.stages):
        width = spec.stage_width(i)
        for b in range(stage.blocks):
            stride = stage.stride if b == 0 else 1
            if i == 0:
                blk = fullconv_train_block(
                    rng, c_prev, width, stride, stage.k, stage.activation, dtype
                )
            else:
                blk = separable_train_block(
                    rng, c_prev, width, stride, stage.k,
                    activation=stage.activation, dtype=dtype,
                )
            if mode == "inference":
                blk = _fresh_inference_block(rng, blk, dtype)
            layers.append(blk)
            c_prev = width
    layers.append(GlobalPoolFlatten())
    head_w = (rng.standard_normal((spec.classes, c_prev)) * 0.01).astype(dtype)
    layers.append(LinearHead(weight=head_w, bias=np.zeros(spec.classes, dtype)))
    return Model(layers=layers, name=spec.name, mode=mode, arch=spec)


def _fresh_inference_block(rng, train_blk, dtype):
    """Random folded-form block with the same geometry as a train block."""
    convs = []
    for stage in train_blk.stages:
        w = _he_weight(
            rng,
            (stage.c_out, stage.c_in // stage.groups, stage.kernel, stage.kernel),
            stage.groups,
            dtype,
        )
        convs.append(
            ConvSpec(
                weight=w,
                bias=np.zeros(stage.c_out, dtype),
                stride=stage.stride,
                padding=stage.kernel // 2,
                groups=stage.groups,
            )
        )
    return InferenceBlock(stages=convs, se=list(train_blk.se), activation=train_blk.activation)


def count_params(model):
    """Total stored tensor elements (weights, biases, batchnorm vectors)."""
    return sum(int(arr.size) for _, arr in model.named_tensors())


def _conv_macs(conv, in_h, in_w):
    out_h = conv_output_extent(in_h, conv.kernel, conv.stride, conv.padding)
    out_w = conv_output_extent(in_w, conv.kernel, conv.stride, conv.padding)
    macs = out_h * out_w * conv.c_out * (conv.c_in // conv.groups) * conv.kernel**2
    return macs, out_h, out_w


def _se_macs(se, h, w):
    c = se.channels
    hidden = se.reduce.c_out
    pool = c * h * w  # accumulates
    convs = c * hidden + hidden * c
    gate = c * h * w  # per-pixel rescale
    return pool + convs + gate


def count_flops(model, input_res):
    """Multiply-accumulate count for one forward pass at a square input.

    Defined for folded models only: a train-mode stack would make the
    number depend on the transient branch count, which is not the
    quantity anyone deploys.
    """
    if model.mode != "inference":
        raise ShapeError(
            "operation count is defined for inference-mode models; fold the "
            "branches first"
        )
    h = w = int(input_res)
    total = 0
    c = model.input_channels
    for layer in model.layers:
        if isinstance(layer, InferenceBlock):
            for conv, gate in zip(layer.stages, layer.se):
                macs, h, w = _conv_macs(conv, h, w)
                total += macs
                if gate is not None:
                    total += _se_macs(gate, h, w)
                c = conv.c_out
        elif isinstance(layer, GlobalPoolFlatten):
            total += c * h * w
            h = w = 1
        elif isinstance(layer, LinearHead):
            total += layer.weight.shape[0] * layer.weight.shape[1]
        else:
            raise ShapeError(
                f"cannot count operations for layer type {type(layer).__name__}"
            )
    return int(total)
