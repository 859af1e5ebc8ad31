"""Wall-clock latency measurement and rank statistics.

The benchmarking protocol is deliberately plain: preallocate one input
tensor, run the model once (or more) to warm caches and lazy allocations,
then time each of many forward passes individually with a monotonic
nanosecond clock.  The headline number is the *minimum* latency, which
filters out scheduler interrupts from other processes; median and upper
percentiles are also kept because desktop CPUs are noisier than a phone
pinned to a benchmark harness.

The statistics half provides Spearman rank correlation (mid-rank tie
handling, t-approximation p-value, exact permutation p-value for tiny
samples) plus a bundled fixture of published (FLOPs, params, latency)
rows so the correlation claims can be checked without running anything.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass
from importlib import resources
from itertools import permutations
from pathlib import Path

import numpy as np

from .block import _he_weight, make_se
from .ops import ACTIVATIONS, ConvSpec, SEParams, conv2d, se_forward
from .zoo import Model

__all__ = [
    "LatencyStats",
    "CorrReport",
    "benchmark",
    "spearman",
    "spearman_exact_p",
    "correlate",
    "ablation_net",
    "AblationBlock",
    "load_fixture",
    "emit_report",
    "read_report",
    "FIXTURE_NAME",
]

FIXTURE_NAME = "comparison_table_v1.csv"


@dataclass(frozen=True)
class LatencyStats:
    """Aggregate of per-iteration wall times, in nanoseconds."""

    min_ns: float
    median_ns: float
    p90_ns: float
    p99_ns: float
    mean_ns: float
    iterations: int
    warmup: int

    def as_dict(self):
        return {
            "min_ns": self.min_ns,
            "median_ns": self.median_ns,
            "p90_ns": self.p90_ns,
            "p99_ns": self.p99_ns,
            "mean_ns": self.mean_ns,
            "iterations": self.iterations,
            "warmup": self.warmup,
        }


@dataclass(frozen=True)
class CorrReport:
    """Spearman correlation between two named metrics."""

    metric_x: str
    metric_y: str
    rho: float
    p_value: float
    n: int

    def as_dict(self):
        return {
            "metric_x": self.metric_x,
            "metric_y": self.metric_y,
            "rho": self.rho,
            "p_value": self.p_value,
            "n": self.n,
        }


def benchmark(runner, input_shape, warmup=1, iters=1000, dtype=np.float32, seed=0):
    """Time ``runner`` over ``iters`` calls on a preallocated input.

    The input is allocated once up front; ``warmup`` calls are executed
    before timing starts and never enter the statistics.  Each timed call
    is wrapped individually with ``time.perf_counter_ns``.  The timing
    loop itself is single-threaded; the runner may parallelise internally.

    Returns a :class:`LatencyStats`.  Raises ``RuntimeError`` naming the
    failing iteration if the runner throws.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(input_shape).astype(dtype)
    for i in range(warmup):
        try:
            runner(x)
        except Exception as exc:
            raise RuntimeError(f"runner failed during warmup call {i}: {exc}") from exc
    samples = np.empty(iters, dtype=np.int64)
    for i in range(iters):
        t0 = time.perf_counter_ns()
        try:
            runner(x)
        except Exception as exc:
            raise RuntimeError(f"runner failed at iteration {i}: {exc}") from exc
        samples[i] = time.perf_counter_ns() - t0
    return LatencyStats(
        min_ns=float(samples.min()),
        median_ns=float(np.median(samples)),
        p90_ns=float(np.percentile(samples, 90)),
        p99_ns=float(np.percentile(samples, 99)),
        mean_ns=float(samples.mean()),
        iterations=int(iters),
        warmup=int(warmup),
    )


def _midranks(values):
    """Ranks 1..n, ties sharing the mean of the positions they occupy."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _rank_pair(xs, ys):
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("inputs must be one-dimensional sequences")
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError(f"need at least 3 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("rank correlation is undefined for a constant sequence")
    return _midranks(x), _midranks(y)


def spearman(xs, ys):
    """Spearman rank correlation, returned as ``(rho, p_value)``.

    Ties get mid-ranks (the average of the positions they would occupy),
    then rho is the Pearson correlation of the two rank vectors.  The
    p-value is the standard two-sided approximation: under the null,
    ``t = rho * sqrt((n - 2) / (1 - rho^2))`` is treated as Student-t
    with ``n - 2`` degrees of freedom.  That approximation is loose for
    very small n; see :func:`spearman_exact_p` for n <= 10.

    Mid-ranking makes the result invariant under any strictly increasing
    transform of either input.  Constant sequences are rejected.
    """
    rx, ry = _rank_pair(xs, ys)
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    rho = float(cx @ cy / math.sqrt((cx @ cx) * (cy @ cy)))
    rho = max(-1.0, min(1.0, rho))
    n = rx.size
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, _t_sf_two_sided(abs(t), n - 2)


def spearman_exact_p(xs, ys):
    """Two-sided permutation p-value for the Spearman statistic.

    Enumerates all n! orderings of ``ys`` and counts those whose |rho| is
    at least the observed one.  Exact, but factorial: refused for n > 10
    (10! is ~3.6M orderings and already takes tens of seconds).
    """
    rx, ry = _rank_pair(xs, ys)
    n = rx.size
    if n > 10:
        raise ValueError(f"exact permutation p-value needs n <= 10, got {n}")
    cx = [float(v) for v in rx - rx.mean()]
    cy = [float(v) for v in ry - ry.mean()]
    # rho differs between permutations only through the cross product, so
    # compare |dot(cx, perm(cy))| against the observed value directly.
    obs = abs(sum(a * b for a, b in zip(cx, cy)))
    scale = math.sqrt(sum(a * a for a in cx) * sum(b * b for b in cy))
    tol = 1e-9 * scale
    hits = 0
    total = 0
    for perm in permutations(cy):
        total += 1
        if abs(sum(a * b for a, b in zip(cx, perm))) >= obs - tol:
            hits += 1
    return hits / total


def _t_sf_two_sided(t, df):
    """P(|T| >= t) for Student-t with ``df`` degrees of freedom."""
    if t == 0.0:
        return 1.0
    return _betainc(0.5 * df, 0.5, df / (df + t * t))


def _betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b) via Lentz's continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    # The continued fraction converges fast only for x below the split
    # point; otherwise evaluate the mirrored tail.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _betacf(a, b, x, max_iter=200, eps=3e-14):
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def correlate(rows, x_key, y_key):
    """Spearman correlation between two numeric columns of ``rows``."""
    try:
        xs = [float(r[x_key]) for r in rows]
        ys = [float(r[y_key]) for r in rows]
    except KeyError as exc:
        raise KeyError(f"rows are missing column {exc.args[0]!r}") from exc
    rho, p = spearman(xs, ys)
    return CorrReport(metric_x=x_key, metric_y=y_key, rho=rho, p_value=p, n=len(xs))


def load_fixture(path=None):
    """Rows of the bundled published-results table (or a CSV like it).

    Returns a list of dicts with ``model`` kept as a string and every
    other column parsed as float.  Columns: model, flops_m, params_m,
    cpu_ms, mobile_ms.
    """
    if path is None:
        text = (resources.files("mobileone") / "fixtures" / FIXTURE_NAME).read_text()
    else:
        text = Path(path).read_text()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for key, val in rec.items():
            row[key] = val if key == "model" else float(val)
        rows.append(row)
    if not rows:
        raise ValueError("fixture has no data rows")
    return rows


@dataclass
class AblationBlock:
    """One layer of the plain latency-ablation stack: conv, optional SE,
    optional residual add, then the activation."""

    conv: ConvSpec
    se: SEParams | None
    activation: str
    skip: bool

    def forward(self, x, mode="eval"):
        y = conv2d(x, self.conv)
        if self.se is not None:
            y, _ = se_forward(y, self.se)
        if self.skip:
            y = y + x
        return ACTIVATIONS[self.activation](y)

    def named_tensors(self):
        yield "conv.weight", self.conv.weight
        yield "conv.bias", self.conv.bias
        if self.se is not None:
            yield "se.reduce.weight", self.se.reduce.weight
            yield "se.reduce.bias", self.se.reduce.bias
            yield "se.expand.weight", self.se.expand.weight
            yield "se.expand.bias", self.se.expand.bias

    def named_params(self):
        yield from self.named_tensors()


def ablation_net(
    depth=30,
    activation="relu",
    with_se=False,
    with_skip=False,
    channels=64,
    seed=0,
    dtype=np.float32,
):
    """A plain stack of ``depth`` 3x3 convolutions for latency ablations.

    The first layer maps 3 input channels to ``channels``; every later
    layer is channels -> channels at stride 1, so residual adds apply to
    all but the first.  ``activation`` is one of relu/gelu/silu, or
    "se_relu" which forces ``with_se`` on.  Width and input resolution
    are not pinned by the protocol this mirrors, so width is a flag here
    and resolution is whatever the caller feeds in (the CLI defaults to
    56x56).  Only latency *orderings* on one machine are meaningful.
    """
    act = str(activation).lower().replace("-", "_")
    use_se = bool(with_se)
    if act == "se_relu":
        act, use_se = "relu", True
    if act not in ACTIVATIONS:
        choices = sorted(ACTIVATIONS) + ["se_relu"]
        raise ValueError(f"unknown activation {activation!r}; choose from {choices}")
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    rng = np.random.default_rng(seed)
    dt = np.dtype(dtype).type
    layers = []
    c_prev = 3
    for _ in range(depth):
        conv = ConvSpec(
            weight=_he_weight(rng, (channels, c_prev, 3, 3), 1, dt),
            bias=np.zeros(channels, dtype=dt),
            stride=1,
            padding=1,
            groups=1,
        )
        se = make_se(rng, channels, 16, dt) if use_se else None
        layers.append(
            AblationBlock(
                conv=conv,
                se=se,
                activation=act,
                skip=bool(with_skip) and c_prev == channels,
            )
        )
        c_prev = channels
    name = f"ablation-{act}-d{depth}"
    return Model(layers=layers, name=name, mode="inference", input_channels=3)


def emit_report(rows, path, fmt=None, columns=None):
    """Write report rows (dicts) to ``path`` as CSV or JSON.

    Column order is stable: ``columns`` if given, else the key order of
    the first row.  The JSON form is ``{"columns": [...], "rows": [...]}``
    and round-trips losslessly through :func:`read_report`; CSV cells use
    Python's shortest-repr float formatting, which also round-trips.
    An empty row list yields a header-only file.
    """
    rows = [dict(r) for r in rows]
    if fmt is None:
        fmt = "json" if str(path).endswith(".json") else "csv"
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    for i, row in enumerate(rows):
        missing = [c for c in columns if c not in row]
        if missing:
            raise ValueError(f"row {i} is missing columns {missing}")
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
    else:
        payload = {"columns": columns, "rows": [{c: r[c] for c in columns} for r in rows]}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return path


def _parse_cell(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report(path, fmt=None):
    """Inverse of :func:`emit_report`; returns ``(columns, rows)``.

    CSV cells are parsed back to int where possible, then float, else
    kept as strings.
    """
    if fmt is None:
        fmt = "json" if str(path).endswith(".json") else "csv"
    if fmt == "json":
        with open(path) as fh:
            payload = json.load(fh)
        return list(payload["columns"]), [dict(r) for r in payload["rows"]]
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            columns = list(reader.fieldnames or [])
            rows = [{k: _parse_cell(v) for k, v in rec.items()} for rec in reader]
        return columns, rows
    raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
