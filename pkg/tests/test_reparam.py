import numpy as np
import pytest

from mobileone.block import (
    BranchConfig,
    InferenceBlock,
    make_stage,
    separable_train_block,
)
from mobileone.kernels import ShapeError
from mobileone.ops import BNParams, ConvSpec, batchnorm_infer, conv2d
from mobileone.reparam import (
    ReparamError,
    calibrate_model,
    fold_bn,
    identity_as_conv,
    merge_stage,
    pad_kernel,
    reparameterize_block,
    reparameterize_model,
)
from mobileone.train import ToyNetConfig, build_toy_net


def _rand_conv_bn(rng, c_in=4, c_out=6, k=3, groups=1, dtype=np.float64):
    conv = ConvSpec(
        weight=rng.standard_normal((c_out, c_in // groups, k, k)).astype(dtype),
        bias=rng.standard_normal(c_out).astype(dtype),
        stride=1,
        padding=k // 2,
        groups=groups,
    )
    bn = BNParams(
        mu=rng.standard_normal(c_out).astype(dtype),
        sigma=(0.2 + rng.random(c_out)).astype(dtype),
        gamma=rng.standard_normal(c_out).astype(dtype),
        beta=rng.standard_normal(c_out).astype(dtype),
    )
    return conv, bn


def test_fold_bn_equals_conv_then_bn():
    rng = np.random.default_rng(0)
    for _ in range(50):
        conv, bn = _rand_conv_bn(rng)
        folded = fold_bn(conv, bn)
        x = rng.standard_normal((2, 4, 6, 6))
        want = batchnorm_infer(conv2d(x, conv), bn)
        got = conv2d(x, folded)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_fold_bn_keeps_storage_dtype():
    rng = np.random.default_rng(1)
    conv, bn = _rand_conv_bn(rng, dtype=np.float32)
    folded = fold_bn(conv, bn)
    assert folded.weight.dtype == np.float32 and folded.bias.dtype == np.float32


def test_fold_bn_rejects_unusable_stats():
    rng = np.random.default_rng(2)
    conv, bn = _rand_conv_bn(rng)
    bn.sigma[1] = 0.0  # in-place damage, as a bad weight file would cause
    with pytest.raises(ReparamError, match="calibrate"):
        fold_bn(conv, bn)
    conv, bn = _rand_conv_bn(rng)
    bn.mu[0] = np.inf
    with pytest.raises(ReparamError):
        fold_bn(conv, bn)


def test_fold_bn_channel_mismatch():
    rng = np.random.default_rng(3)
    conv, _ = _rand_conv_bn(rng, c_out=6)
    _, bn = _rand_conv_bn(rng, c_out=4)
    with pytest.raises(ShapeError):
        fold_bn(conv, bn)


@pytest.mark.parametrize("groups", [1, 2, 6])
def test_identity_as_conv_is_exact(groups):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 5, 5))
    ident = identity_as_conv(6, groups, 3)
    np.testing.assert_array_equal(conv2d(x, ident), x)


def test_identity_as_conv_rejects_even_kernel():
    with pytest.raises(ShapeError, match="odd"):
        identity_as_conv(4, 1, 2)
    with pytest.raises(ShapeError):
        identity_as_conv(5, 2, 3)


def test_pad_kernel_centres_small_kernels():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((2, 3, 1, 1))
    p = pad_kernel(w, 5)
    assert p.shape == (2, 3, 5, 5)
    np.testing.assert_array_equal(p[:, :, 2, 2], w[:, :, 0, 0])
    assert np.count_nonzero(p) == np.count_nonzero(w)
    # padded-to-same returns the input unchanged
    assert pad_kernel(w, 1) is w
    with pytest.raises(ShapeError):
        pad_kernel(w, 4)
    with pytest.raises(ShapeError):
        pad_kernel(rng.standard_normal((2, 3, 3, 3)), 1)


def test_padded_scale_branch_equals_unpadded_conv():
    """A 1x1 kernel lifted to 3x3 with padding 1 computes the same map."""
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 6, 6))
    one = ConvSpec(
        weight=rng.standard_normal((4, 3, 1, 1)),
        bias=rng.standard_normal(4),
    )
    lifted = ConvSpec(weight=pad_kernel(one.weight, 3), bias=one.bias, padding=1)
    np.testing.assert_allclose(conv2d(x, one), conv2d(x, lifted), atol=1e-14)


def test_merge_stage_distributes_over_branches():
    rng = np.random.default_rng(7)
    for trial in range(20):
        stride = 1 if trial % 2 else 2
        cfg = BranchConfig(
            k=1 + trial % 4,
            kernel=3,
            has_scale_branch=True,
            has_skip_bn=stride == 1,
        )
        stage = make_stage(rng, 4, 4, stride, 1, cfg, np.float64)
        merged = merge_stage(stage)
        x = rng.standard_normal((2, 4, 7, 7))
        np.testing.assert_allclose(
            conv2d(x, merged), stage.forward(x, mode="eval"), rtol=0, atol=1e-10
        )


def test_merge_stage_depthwise():
    rng = np.random.default_rng(8)
    cfg = BranchConfig(k=2, kernel=3, has_scale_branch=True, has_skip_bn=True)
    stage = make_stage(rng, 5, 5, 1, 5, cfg, np.float64)
    merged = merge_stage(stage)
    assert merged.groups == 5
    x = rng.standard_normal((1, 5, 6, 6))
    np.testing.assert_allclose(
        conv2d(x, merged), stage.forward(x, mode="eval"), atol=1e-10
    )


def test_reparameterize_block_matches_eval_forward():
    rng = np.random.default_rng(9)
    blk = separable_train_block(
        rng, 4, 4, stride=1, k=3, activation="se_relu", se_ratio=2, dtype=np.float64
    )
    folded = reparameterize_block(blk)
    assert isinstance(folded, InferenceBlock)
    x = rng.standard_normal((2, 4, 8, 8))
    np.testing.assert_allclose(
        folded.forward(x), blk.forward(x, mode="eval"), rtol=0, atol=1e-10
    )
    # folding a folded block is a no-op passthrough
    assert reparameterize_block(folded) is folded


def test_reparameterize_block_rejects_foreign_layers():
    with pytest.raises(ReparamError):
        reparameterize_block(object())


def test_calibrate_model_adopts_batch_statistics():
    rng = np.random.default_rng(10)
    model = build_toy_net(ToyNetConfig(channels=(4, 8), classes=3, seed=1))
    x = rng.standard_normal((8, 3, 16, 16)).astype(np.float32)
    calibrate_model(model, x)
    conv, bn = model.layers[0].stages[0].branches[0]
    z = conv2d(x, conv)
    np.testing.assert_allclose(bn.mu, z.mean(axis=(0, 2, 3)), rtol=1e-5, atol=1e-6)


def test_reparameterize_model_end_to_end():
    rng = np.random.default_rng(11)
    model = build_toy_net(ToyNetConfig(channels=(4, 8), classes=3, seed=2))
    x = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
    calibrate_model(model, x)
    folded = reparameterize_model(model)
    assert folded.mode == "inference"
    assert reparameterize_model(folded) is folded
    y_train = model.forward(x, mode="eval")
    y_fold = folded.forward(x, mode="eval")
    assert float(np.max(np.abs(y_train - y_fold))) < 1e-5
    # the folded head is a copy, not a view of the training weights
    model.layers[-1].weight[:] += 1.0
    y_fold2 = folded.forward(x, mode="eval")
    np.testing.assert_array_equal(y_fold, y_fold2)
