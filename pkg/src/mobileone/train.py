"""Desk-scale training: schedules, loss, manual backward, SGD, toy data.

Nothing here aims at full-dataset accuracy.  The point is that the
training dynamics are real: exact reverse-mode gradients through every
layer (checked against finite differences), SGD with momentum and decoupled
cosine-annealed hyperparameters, an EMA shadow of the weights, and a small
synthetic texture dataset on which branch-replication effects are
measurable in minutes.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .block import TrainBlock, fullconv_train_block, separable_train_block
from .ops import (
    ShapeError,
    batchnorm_train_backward,
    conv2d_backward,
    global_avgpool_backward,
    linear_backward,
    relu_backward,
    se_backward,
)
from .zoo import GlobalPoolFlatten, LinearHead, Model, _layer_prefix

# ---------------------------------------------------------------------------
# Schedules


def cosine_value(t, v0, v1, total):
    """Cosine anneal from v0 (t=0) to v1 (t=total), endpoints exact.

    The endpoints are returned verbatim rather than through the cosine
    expression: ``v1 + (v0 - v1)`` does not round back to ``v0`` for
    every float pair.
    """
    if total <= 0:
        raise ValueError(f"schedule length must be positive, got {total}")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside schedule [0, {total}]")
    if t == 0:
        return float(v0)
    if t == total:
        return float(v1)
    return float(v1 + 0.5 * (v0 - v1) * (1.0 + np.cos(np.pi * t / total)))


@dataclass(frozen=True)
class ScheduleSpec:
    """Cosine-annealed learning rate and weight decay over a step budget."""

    steps: int
    lr0: float = 0.1
    lr1: float = 0.0
    wd0: float = 1e-4
    wd1: float = 1e-5

    def lr(self, t):
        return cosine_value(t, self.lr0, self.lr1, self.steps)

    def wd(self, t):
        return cosine_value(t, self.wd0, self.wd1, self.steps)


@dataclass(frozen=True)
class CurriculumSpec:
    """Progressive input-resolution phases: (start_epoch, end_epoch, res, aug).

    Phases are half-open epoch ranges that must tile [0, total) without
    gaps.  ``aug`` scales the dataset noise amplitude, so early low-res
    phases can also be low-augmentation ones.
    """

    phases: tuple

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a curriculum needs at least one phase")
        prev_end = self.phases[0][0]
        for start, end, res, aug in self.phases:
            if start != prev_end:
                raise ValueError(
                    f"curriculum phases must be contiguous; phase starting at "
                    f"{start} does not meet previous end {prev_end}"
                )
            if end <= start:
                raise ValueError(f"empty curriculum phase [{start}, {end})")
            if res < 4:
                raise ValueError(f"resolution {res} too small to pool over")
            prev_end = end

    @property
    def total_epochs(self):
        return self.phases[-1][1]

    def at(self, epoch):
        """(resolution, aug_strength) in force at an epoch."""
        for start, end, res, aug in self.phases:
            if start <= epoch < end:
                return res, aug
        raise ValueError(f"epoch {epoch} outside curriculum [0, {self.total_epochs})")


# The published full-scale recipe: train small-and-weakly-augmented first,
# finish at full resolution.  Toy runs pass their own phases instead.
STANDARD_CURRICULUM = CurriculumSpec(
    phases=((0, 39, 160, 0.3), (39, 114, 192, 0.6), (114, 300, 224, 1.0))
)


# ---------------------------------------------------------------------------
# Loss


def label_smoothed_ce(logits, targets, smoothing=0.1):
    """Cross-entropy against smoothed targets; returns (loss, dloss/dlogits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets must be ({n},), got {targets.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    q = np.full_like(logits, smoothing / k)
    q[np.arange(n), targets] += 1.0 - smoothing
    loss = float(-(q * logp).sum() / n)
    grad = (np.exp(logp) - q) / n
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# Model-level forward/backward


def _stage_backward(stage, cache, gy, grads, prefix):
    x_in, branch_caches, scale_cache, skip_cache = cache
    gx = None
    for i, (conv, _) in enumerate(stage.branches):
        gz, ggamma, gbeta = batchnorm_train_backward(gy, branch_caches[i])
        gxi, gw, _ = conv2d_backward(
            x_in, conv.weight, gz, conv.stride, conv.padding, conv.groups
        )
        grads[f"{prefix}.b{i}.conv.weight"] = gw
        grads[f"{prefix}.b{i}.bn.gamma"] = ggamma
        grads[f"{prefix}.b{i}.bn.beta"] = gbeta
        gx = gxi if gx is None else gx + gxi
    if stage.scale is not None:
        conv, _ = stage.scale
        gz, ggamma, gbeta = batchnorm_train_backward(gy, scale_cache)
        gxi, gw, _ = conv2d_backward(
            x_in, conv.weight, gz, conv.stride, conv.padding, conv.groups
        )
        grads[f"{prefix}.scale.conv.weight"] = gw
        grads[f"{prefix}.scale.bn.gamma"] = ggamma
        grads[f"{prefix}.scale.bn.beta"] = gbeta
        gx += gxi
    if stage.skip is not None:
        gz, ggamma, gbeta = batchnorm_train_backward(gy, skip_cache)
        grads[f"{prefix}.skip.gamma"] = ggamma
        grads[f"{prefix}.skip.beta"] = gbeta
        gx += gz
    return gx


def _block_backward(block, caches, gy, grads, prefix):
    for j in reversed(range(len(block.stages))):
        stage = block.stages[j]
        gate = block.se[j]
        stage_cache, se_cache, pre_act = caches[j]
        gy = relu_backward(gy, pre_act)
        if gate is not None:
            gy, se_grads = se_backward(gy, gate, se_cache)
            for name, g in se_grads.items():
                grads[f"{prefix}.s{j}.se.{name}"] = g
        gy = _stage_backward(stage, stage_cache, gy, grads, f"{prefix}.s{j}")
    return gy


def backward(model, x, targets, smoothing=0.1, bn_momentum=0.1):
    """One train-mode forward/backward pass.

    Returns ``(loss, grads)`` with one gradient per entry of
    ``model.named_params()``.  Running BN statistics advance as a side
    effect, exactly as they would in a real training step.
    """
    if model.mode != "train":
        raise ShapeError("backward needs a train-mode model")
    caches = []
    act = x
    for i, layer in enumerate(model.layers):
        if isinstance(layer, TrainBlock):
            act, c = layer.forward_cached(act, "train", bn_momentum=bn_momentum)
            caches.append((layer, c))
        elif isinstance(layer, GlobalPoolFlatten):
            caches.append((layer, act.shape))
            act = layer.forward(act)
        elif isinstance(layer, LinearHead):
            caches.append((layer, act))
            act = layer.forward(act)
        else:
            raise ShapeError(f"cannot differentiate layer {type(layer).__name__}")
    loss, gy = label_smoothed_ce(act, targets, smoothing)
    grads = {}
    for i in reversed(range(len(model.layers))):
        layer, cache = caches[i]
        prefix = _layer_prefix(layer, i)
        if isinstance(layer, TrainBlock):
            gy = _block_backward(layer, cache, gy, grads, prefix)
        elif isinstance(layer, GlobalPoolFlatten):
            n, c, h, w = cache
            gy = global_avgpool_backward(gy.reshape(n, c, 1, 1), h, w)
        elif isinstance(layer, LinearHead):
            gy, gw, gb = linear_backward(gy, cache, layer.weight)
            grads[f"{prefix}.weight"] = gw
            grads[f"{prefix}.bias"] = gb
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer state


@dataclass
class TrainState:
    """SGD-with-momentum buffers plus an EMA shadow of the parameters."""

    params: dict
    velocity: dict
    ema: dict
    momentum: float = 0.9
    ema_decay: float = 0.9995
    step: int = 0


def init_train_state(model, momentum=0.9, ema_decay=0.9995):
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if not 0.0 <= ema_decay <= 1.0:
        raise ValueError(f"EMA decay must be in [0, 1], got {ema_decay}")
    params = dict(model.named_params())
    return TrainState(
        params=params,
        velocity={k: np.zeros_like(v) for k, v in params.items()},
        ema={k: v.copy() for k, v in params.items()},
        momentum=momentum,
        ema_decay=ema_decay,
    )


def sgd_step(state, grads, lr, weight_decay=0.0):
    """In-place SGD update: decay folds into the gradient, then momentum.

    ``v <- m*v + (g + wd*p)``, ``p <- p - lr*v``; the EMA shadow then
    tracks ``ema <- d*ema + (1-d)*p``.  With ``ema_decay=0`` the shadow
    equals the parameters; with 1.0 it stays frozen at initialisation.
    """
    missing = set(state.params) - set(grads)
    if missing:
        raise KeyError(f"gradients missing for {sorted(missing)[:5]}")
    d = state.ema_decay
    for name, p in state.params.items():
        g = grads[name] + weight_decay * p
        v = state.velocity[name]
        v *= state.momentum
        v += g
        p -= lr * v
        if d == 0.0:
            state.ema[name][...] = p
        else:
            shadow = state.ema[name]
            shadow *= d
            shadow += (1.0 - d) * p
    state.step += 1


def swap_in_ema(state):
    """Copy EMA values into the live parameters (returns prior values)."""
    prior = {k: v.copy() for k, v in state.params.items()}
    for k, p in state.params.items():
        p[...] = state.ema[k]
    return prior


# ---------------------------------------------------------------------------
# Synthetic texture dataset


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 3, res, res)
    labels: np.ndarray  # (N,) int64
    classes: int

    def __len__(self):
        return self.images.shape[0]


def make_toy_dataset(
    classes=4, per_class=128, res=16, seed=0, noise=0.3, dtype=np.float32
):
    """Gaussian class templates rendered as low-frequency textures.

    Each class is a fixed random 4x4 field upsampled to the working
    resolution; samples scale it by a random amplitude and add Gaussian
    pixel noise.  The same seed always yields the same class templates at
    any resolution, so curriculum phases see consistent classes.
    """
    if res % 4:
        raise ValueError(f"resolution must be a multiple of 4, got {res}")
    template_rng = np.random.default_rng(seed)
    templates = template_rng.standard_normal((classes, 3, 4, 4))
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    sample_rng = np.random.default_rng(seed + 1)
    n = classes * per_class
    up = np.kron(templates, np.ones((1, 1, res // 4, res // 4)))
    labels = np.repeat(np.arange(classes), per_class)
    amps = 1.0 + 0.25 * sample_rng.standard_normal(n)
    images = up[labels] * amps.reshape(-1, 1, 1, 1)
    images += noise * sample_rng.standard_normal(images.shape)
    order = sample_rng.permutation(n)
    return ToyDataset(
        images=images[order].astype(dtype),
        labels=labels[order].astype(np.int64),
        classes=classes,
    )


def _resize_nearest(images, res):
    base = images.shape[-1]
    if res == base:
        return images
    if base % res:
        raise ValueError(
            f"curriculum resolution {res} must divide the dataset resolution {base}"
        )
    step = base // res
    return np.ascontiguousarray(images[:, :, ::step, ::step])


# ---------------------------------------------------------------------------
# Toy models and the training loop


@dataclass(frozen=True)
class ToyNetConfig:
    """A 3-block net exercising every layer type at toy scale."""

    channels: tuple = (16, 32)
    classes: int = 4
    k: int = 1
    use_scale: bool = False
    use_skip: bool = False
    seed: int = 0
    dtype: type = np.float32

    def as_dict(self):
        return {
            "channels": list(self.channels),
            "classes": self.classes,
            "k": self.k,
            "use_scale": self.use_scale,
            "use_skip": self.use_skip,
            "seed": self.seed,
            "dtype": np.dtype(self.dtype).name,
        }


def build_toy_net(cfg):
    """Stem + stride-1 separable + stride-2 separable + pool + classifier."""
    rng = np.random.default_rng(cfg.seed)
    dtype = np.dtype(cfg.dtype).type
    c0, c1 = cfg.channels
    layers = [
        fullconv_train_block(rng, 3, c0, 2, cfg.k, dtype=dtype, use_scale=cfg.use_scale),
        separable_train_block(
            rng, c0, c0, 1, cfg.k, use_scale=cfg.use_scale, use_skip=cfg.use_skip, dtype=dtype
        ),
        separable_train_block(
            rng, c0, c1, 2, cfg.k, use_scale=cfg.use_scale, use_skip=cfg.use_skip, dtype=dtype
        ),
        GlobalPoolFlatten(),
        LinearHead(
            weight=(rng.standard_normal((cfg.classes, c1)) * 0.01).astype(dtype),
            bias=np.zeros(cfg.classes, dtype),
        ),
    ]
    return Model(layers=layers, name="toy", mode="train")


def evaluate_loss(model, images, labels, smoothing=0.1, batch_size=64):
    """Mean label-smoothed loss over a dataset, eval-mode forward."""
    total, count = 0.0, 0
    for lo in range(0, images.shape[0], batch_size):
        hi = min(lo + batch_size, images.shape[0])
        logits = model.forward(images[lo:hi], mode="eval")
        loss, _ = label_smoothed_ce(logits, labels[lo:hi], smoothing)
        total += loss * (hi - lo)
        count += hi - lo
    return total / count


def train_toy(
    model,
    train_set,
    val_set,
    schedule,
    epochs,
    batch_size=32,
    curriculum=None,
    smoothing=0.1,
    seed=0,
    momentum=0.9,
    ema_decay=0.9995,
):
    """Train a model on toy data; returns per-epoch log rows.

    The schedule's step budget must cover ``epochs * ceil(N / batch)``
    steps.  A non-finite loss aborts immediately rather than logging
    garbage.
    """
    state = init_train_state(model, momentum=momentum, ema_decay=ema_decay)
    rng = np.random.default_rng(seed)
    n = len(train_set)
    steps_per_epoch = (n + batch_size - 1) // batch_size
    if schedule.steps < epochs * steps_per_epoch:
        raise ValueError(
            f"schedule covers {schedule.steps} steps but training needs "
            f"{epochs * steps_per_epoch}"
        )
    rows = []
    t = 0
    for epoch in range(epochs):
        if curriculum is not None:
            res, _ = curriculum.at(epoch)
            images = _resize_nearest(train_set.images, res)
            val_images = _resize_nearest(val_set.images, res)
        else:
            images, val_images = train_set.images, val_set.images
        order = rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grads = backward(
                model, images[idx], train_set.labels[idx], smoothing
            )
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss ({loss}) at epoch {epoch}, "
                    f"step {t}; lower the learning rate or check the data"
                )
            sgd_step(state, grads, lr=schedule.lr(t), weight_decay=schedule.wd(t))
            epoch_loss += loss * len(idx)
            seen += len(idx)
            t += 1
        rows.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / seen,
                "val_loss": evaluate_loss(model, val_images, val_set.labels, smoothing),
                "lr": schedule.lr(t - 1),
                "wd": schedule.wd(t - 1),
            }
        )
    return rows, state


LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wd")


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
    return path
