"""Multi-branch CNNs that fold to single-conv form for inference.

Train-time blocks carry k parallel conv+BN branches plus 1x1-scale and
BN-skip paths; :func:`reparameterize_model` collapses each block into one
convolution with identical outputs.  The package also ships the model
zoo (S0-S4 and the micro variants), param/MAC counting, a small manual
autograd good enough to train the blocks, a latency harness with rank
statistics, and a binary weight container.
"""

from .kernels import (
    ShapeError,
    active_backend,
    available_backends,
    num_threads,
    set_num_threads,
    use_backend,
)
from .ops import BNParams, ConvSpec, SEParams
from .block import (
    BranchConfig,
    InferenceBlock,
    RepStage,
    TrainBlock,
    fullconv_train_block,
    separable_train_block,
)
from .zoo import (
    VARIANT_NAMES,
    ArchSpec,
    InitPolicy,
    Model,
    build_model,
    count_flops,
    count_params,
    variant_spec,
)
from .reparam import (
    ReparamError,
    calibrate_model,
    fold_bn,
    identity_as_conv,
    merge_stage,
    pad_kernel,
    reparameterize_block,
    reparameterize_model,
)
from .serialize import FormatError, load_model, save_model
from .train import (
    ScheduleSpec,
    ToyNetConfig,
    backward,
    build_toy_net,
    cosine_value,
    make_toy_dataset,
    sgd_step,
    train_toy,
)
from .bench import (
    CorrReport,
    LatencyStats,
    ablation_net,
    benchmark,
    correlate,
    load_fixture,
    spearman,
    spearman_exact_p,
)

__version__ = "0.1.0"

__all__ = [
    "ShapeError",
    "active_backend",
    "available_backends",
    "num_threads",
    "set_num_threads",
    "use_backend",
    "BNParams",
    "ConvSpec",
    "SEParams",
    "BranchConfig",
    "InferenceBlock",
    "RepStage",
    "TrainBlock",
    "fullconv_train_block",
    "separable_train_block",
    "VARIANT_NAMES",
    "ArchSpec",
    "InitPolicy",
    "Model",
    "build_model",
    "count_flops",
    "count_params",
    "variant_spec",
    "ReparamError",
    "calibrate_model",
    "fold_bn",
    "identity_as_conv",
    "merge_stage",
    "pad_kernel",
    "reparameterize_block",
    "reparameterize_model",
    "FormatError",
    "load_model",
    "save_model",
    "ScheduleSpec",
    "ToyNetConfig",
    "backward",
    "build_toy_net",
    "cosine_value",
    "make_toy_dataset",
    "sgd_step",
    "train_toy",
    "CorrReport",
    "LatencyStats",
    "ablation_net",
    "benchmark",
    "correlate",
    "load_fixture",
    "spearman",
    "spearman_exact_p",
    "__version__",
]
