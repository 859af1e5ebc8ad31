"""Command-line front door: build, fold, verify, bench, correlate, train.

Exit codes are a stable contract for scripting: 0 success, 1 runtime
failure (missing file, verification over tolerance, bad data), 2 usage
error (argparse handles those).  Every subcommand is deterministic for a
given --seed, except the wall-clock values produced by ``bench``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, kernels
from .reparam import calibrate_model, reparameterize_model
from .serialize import load_model, save_model
from .train import (
    ScheduleSpec,
    ToyNetConfig,
    build_toy_net,
    make_toy_dataset,
    train_toy,
    write_training_log,
)
from .zoo import (
    VARIANT_NAMES,
    InitPolicy,
    build_model,
    count_flops,
    count_params,
    variant_spec,
)

BENCH_COLUMNS = (
    "model",
    "backend",
    "params",
    "macs_m",
    "min_ns",
    "median_ns",
    "p90_ns",
    "p99_ns",
    "mean_ns",
    "iterations",
    "warmup",
)


def _variant_key(text):
    return text.lower().replace("-", "").replace("_", "")


def _model_dtype(model):
    for _, arr in model.named_tensors():
        return arr.dtype
    return np.dtype(np.float32)


def cmd_build(args):
    spec = variant_spec(args.variant, classes=args.classes)
    model = build_model(spec, mode=args.mode, init=InitPolicy(seed=args.seed))
    if args.mode == "train":
        # Settle the batchnorm running statistics on a seeded batch so the
        # saved container folds cleanly; fresh identity stats let the k
        # parallel branches compound activations out of float32 range.
        rng = np.random.default_rng(args.seed)
        batch = rng.standard_normal((16, 3, 64, 64)).astype(_model_dtype(model))
        calibrate_model(model, batch)
    save_model(model, args.out)
    infer = build_model(spec, mode="inference", init=InitPolicy(seed=args.seed))
    macs = count_flops(infer, args.res)
    print(f"wrote {spec.name} ({args.mode}) to {args.out}")
    print(f"{args.mode} params: {count_params(model):,}")
    print(
        f"inference params: {count_params(infer):,}"
        f"  macs@{args.res}: {macs / 1e6:.1f}M"
    )
    return 0


def cmd_reparam(args):
    model = load_model(args.input)
    if model.mode == "inference":
        print(
            "warning: input is already in inference form; copying unchanged",
            file=sys.stderr,
        )
        save_model(model, args.out)
        return 0
    before = count_params(model)
    folded = reparameterize_model(model)
    save_model(folded, args.out)
    print(f"wrote folded model to {args.out}")
    print(f"params: {before:,} -> {count_params(folded):,}")
    return 0


def cmd_verify(args):
    model = load_model(args.input)
    if model.mode == "inference":
        print("error: verify needs a train-form model as input", file=sys.stderr)
        return 1
    dtype = _model_dtype(model)
    rng = np.random.default_rng(args.seed)
    if args.against is not None:
        # Comparing to a saved folded file: the train model must stay
        # exactly as loaded, or its fold would drift from the file.
        folded = load_model(args.against)
        if folded.mode != "inference":
            print("error: --against expects an inference-form container", file=sys.stderr)
            return 1
    else:
        if args.calibrate:
            batch = rng.standard_normal((16, 3, args.res, args.res)).astype(dtype)
            calibrate_model(model, batch)
        folded = reparameterize_model(model)
    worst = 0.0
    for _ in range(args.trials):
        x = rng.standard_normal((1, 3, args.res, args.res)).astype(dtype)
        a = model.forward(x, mode="eval")
        b = folded.forward(x, mode="eval")
        worst = max(worst, float(np.max(np.abs(a - b))))
    status = "OK" if worst <= args.tol else "FAIL"
    print(
        f"{status}: max abs deviation over {args.trials} inputs: "
        f"{worst:.3e} (tol {args.tol:.1e})"
    )
    return 0 if worst <= args.tol else 1


def _print_rows(rows, columns, fmt, stream):
    if fmt == "json":
        payload = {"columns": list(columns), "rows": [dict(r) for r in rows]}
        json.dump(payload, stream, indent=2)
        stream.write("\n")
    else:
        writer = csv.DictWriter(stream, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def cmd_bench(args):
    if args.threads is not None:
        kernels.set_num_threads(args.threads)
    if args.model is not None:
        model = load_model(args.model)
        res = args.res if args.res is not None else 224
        macs = count_flops(model, res) / 1e6 if model.mode == "inference" else ""
        name = model.name
    else:
        model = bench.ablation_net(
            depth=args.depth,
            activation=args.ablation,
            with_se=args.se,
            with_skip=args.skip,
            channels=args.channels,
            seed=args.seed,
        )
        res = args.res if args.res is not None else 56
        macs = ""
        name = model.name
    params = count_params(model)
    if args.backend == "all":
        backends = kernels.available_backends()
    elif args.backend == "auto":
        backends = [kernels.active_backend()]
    else:
        backends = [args.backend]
    rows = []
    for bk in backends:
        kernels.use_backend(bk)
        stats = bench.benchmark(
            lambda z: model.forward(z, mode="eval"),
            (args.batch, 3, res, res),
            warmup=args.warmup,
            iters=args.iters,
            seed=args.seed,
        )
        row = {"model": name, "backend": bk, "params": params, "macs_m": macs}
        row.update(stats.as_dict())
        rows.append(row)
    if args.out:
        bench.emit_report(rows, args.out, fmt=args.format, columns=list(BENCH_COLUMNS))
        print(f"wrote {args.out}")
    else:
        _print_rows(rows, BENCH_COLUMNS, args.format, sys.stdout)
    return 0


def cmd_correlate(args):
    rows = bench.load_fixture(args.fixture)
    report = bench.correlate(rows, args.x, args.y)
    print(
        f"spearman[{report.metric_x} vs {report.metric_y}]: "
        f"rho={report.rho:+.4f} p={report.p_value:.4g} n={report.n}"
    )
    return 0


def cmd_train_toy(args):
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    data_kw = {"classes": 4, "per_class": 128, "res": 16, "noise": 0.3}
    data_kw.update(cfg.get("data", {}))
    net_kw = {"channels": (16, 32), "k": 1, "use_scale": False, "use_skip": False}
    net_kw.update(cfg.get("net", {}))
    net_kw["channels"] = tuple(net_kw["channels"])
    sched_kw = {"lr0": 0.05, "lr1": 0.0, "wd0": 1e-4, "wd1": 1e-5}
    sched_kw.update(cfg.get("schedule", {}))
    epochs = args.epochs if args.epochs is not None else int(cfg.get("epochs", 8))
    batch = args.batch_size if args.batch_size is not None else int(cfg.get("batch_size", 32))

    train_set = make_toy_dataset(seed=args.seed, **data_kw)
    val_kw = dict(data_kw, per_class=max(8, data_kw["per_class"] // 4))
    val_set = make_toy_dataset(seed=args.seed + 1, **val_kw)
    net = build_toy_net(ToyNetConfig(classes=data_kw["classes"], seed=args.seed, **net_kw))
    steps = epochs * math.ceil(len(train_set.labels) / batch)
    schedule = ScheduleSpec(steps=steps, **sched_kw)
    rows, _ = train_toy(
        net, train_set, val_set, schedule, epochs, batch_size=batch, seed=args.seed
    )
    for r in rows:
        print(
            f"epoch {r['epoch']:3d}  train {r['train_loss']:.4f}  "
            f"val {r['val_loss']:.4f}  lr {r['lr']:.5f}  wd {r['wd']:.2e}"
        )
    if args.out:
        write_training_log(rows, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_count(args):
    spec = variant_spec(args.variant, classes=args.classes)
    model = build_model(spec, mode="inference", init=InitPolicy(seed=0))
    params = count_params(model)
    macs = count_flops(model, args.res)
    print(
        f"{spec.name}: params {params:,} ({params / 1e6:.2f}M)"
        f"  macs@{args.res}: {macs / 1e6:.1f}M"
    )
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mobileone",
        description="Build, fold, verify, benchmark, and train the model family.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a variant and save it")
    p.add_argument("--variant", required=True, type=_variant_key, choices=VARIANT_NAMES)
    p.add_argument("--mode", choices=("train", "inference"), default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--res", type=int, default=224, help="resolution for the MAC summary")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("reparam", help="fold a train-form container to inference form")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reparam)

    p = sub.add_parser("verify", help="check train-vs-folded output equivalence")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument(
        "--against",
        default=None,
        help="saved inference container to compare to (skips calibration)",
    )
    p.add_argument("--trials", type=int, default=10)
    p.add_argument(
        "--tol",
        type=float,
        default=1e-4,
        help="max-abs logit deviation allowed at 32-bit, model level",
    )
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--no-calibrate",
        dest="calibrate",
        action="store_false",
        help="skip the batch-stats calibration pass before folding",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time forward passes of a model or ablation stack")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="weight container to benchmark")
    src.add_argument(
        "--ablation",
        help="activation for a plain conv stack (relu/gelu/silu/se_relu)",
    )
    p.add_argument("--depth", type=int, default=30)
    p.add_argument("--se", action="store_true", help="add squeeze-excite per layer")
    p.add_argument("--skip", action="store_true", help="add residual adds per layer")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--res", type=int, default=None, help="input resolution (default 56 ablation, 224 model)")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--backend", default="auto", choices=("auto", "all", "compiled", "numpy"))
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("correlate", help="rank correlation over a results table")
    p.add_argument("--fixture", default=None, help="CSV path (default: bundled table)")
    p.add_argument("-x", default="flops_m")
    p.add_argument("-y", default="mobile_ms")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("train-toy", help="train a small net on the synthetic dataset")
    p.add_argument("--config", default=None, help="JSON overrides (net/data/schedule)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the per-epoch log CSV here")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("count", help="print params and MACs for a variant")
    p.add_argument("--variant", required=True, type=_variant_key, choices=VARIANT_NAMES)
    p.add_argument("--classes", type=int, default=1000)
    p.add_argument("--res", type=int, default=224)
    p.set_defaults(func=cmd_count)

    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
