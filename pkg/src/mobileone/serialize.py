"""Binary weight container with a JSON sidecar.

Layout (all integers little-endian):

====================  =======================================
magic                 4 bytes, ``MOB1``
version               u32 (currently 1)
tensor count          u32
per-tensor records    u32 name length, UTF-8 name bytes,
                      u8 dtype tag, u8 rank, u32 dims * rank,
                      u64 byte offset into the data section
data section          raw tensor bytes, little-endian
====================  =======================================

The model's structure travels inside the container as one extra record,
``meta/model``: a uint8 tensor holding UTF-8 JSON that describes every
layer, so a file is self-contained.  A human-readable sidecar at
``<path>.json`` mirrors the header (names, shapes, offsets, structure)
for inspection; loading never reads it.

Any header inconsistency (bad magic, unknown version, truncated records,
out-of-bounds offsets, duplicate names) raises :class:`FormatError`
before any model object is half-built.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .block import (
    BranchConfig,
    InferenceBlock,
    TrainBlock,
    make_se,
    make_stage,
)
from .ops import ConvSpec, ShapeError
from .zoo import ArchSpec, GlobalPoolFlatten, LinearHead, Model

MAGIC = b"MOB1"
VERSION = 1
META_NAME = "meta/model"

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    """The file is not a valid weight container."""


# ---------------------------------------------------------------------------
# Structure descriptors


def _dtype_name(layer_tensors):
    for _, arr in layer_tensors:
        return str(arr.dtype)
    return "float32"


def describe_model(model):
    """JSON-friendly structural description of a model."""
    layers = []
    for layer in model.layers:
        if isinstance(layer, TrainBlock):
            layers.append(
                {
                    "kind": "train_block",
                    "activation": layer.activation,
                    "dtype": _dtype_name(layer.named_tensors()),
                    "stages": [
                        {
                            "c_in": st.c_in,
                            "c_out": st.c_out,
                            "stride": st.stride,
                            "groups": st.groups,
                            "kernel": st.kernel,
                            "k": len(st.branches),
                            "scale": st.scale is not None,
                            "skip": st.skip is not None,
                        }
                        for st in layer.stages
                    ],
                    "se": [None if g is None else g.ratio for g in layer.se],
                }
            )
        elif isinstance(layer, InferenceBlock):
            layers.append(
                {
                    "kind": "inference_block",
                    "activation": layer.activation,
                    "dtype": _dtype_name(layer.named_tensors()),
                    "stages": [
                        {
                            "c_in": cv.c_in,
                            "c_out": cv.c_out,
                            "stride": cv.stride,
                            "groups": cv.groups,
                            "kernel": cv.kernel,
                        }
                        for cv in layer.stages
                    ],
                    "se": [None if g is None else g.ratio for g in layer.se],
                }
            )
        elif isinstance(layer, GlobalPoolFlatten):
            layers.append({"kind": "global_pool"})
        elif isinstance(layer, LinearHead):
            layers.append(
                {
                    "kind": "linear",
                    "features": int(layer.weight.shape[1]),
                    "classes": int(layer.weight.shape[0]),
                    "dtype": str(layer.weight.dtype),
                }
            )
        else:
            raise ShapeError(
                f"cannot serialise layer type {type(layer).__name__}"
            )
    return {
        "name": model.name,
        "mode": model.mode,
        "input_channels": model.input_channels,
        "arch": model.arch.as_dict() if model.arch is not None else None,
        "layers": layers,
    }


def _layer_from_descriptor(d):
    rng = np.random.default_rng(0)  # values are overwritten from the file
    kind = d["kind"]
    if kind == "train_block":
        dtype = np.dtype(d["dtype"]).type
        stages = [
            make_stage(
                rng,
                s["c_in"],
                s["c_out"],
                s["stride"],
                s["groups"],
                BranchConfig(
                    k=s["k"],
                    kernel=s["kernel"],
                    has_scale_branch=s["scale"],
                    has_skip_bn=s["skip"],
                ),
                dtype,
            )
            for s in d["stages"]
        ]
        se = [
            None if r is None else make_se(rng, st.c_out, r, dtype)
            for st, r in zip(stages, d["se"])
        ]
        return TrainBlock(stages=stages, se=se, activation=d["activation"])
    if kind == "inference_block":
        dtype = np.dtype(d["dtype"]).type
        convs = []
        for s in d["stages"]:
            convs.append(
                ConvSpec(
                    weight=np.zeros(
                        (s["c_out"], s["c_in"] // s["groups"], s["kernel"], s["kernel"]),
                        dtype,
                    ),
                    bias=np.zeros(s["c_out"], dtype),
                    stride=s["stride"],
                    padding=s["kernel"] // 2,
                    groups=s["groups"],
                )
            )
        se = [
            None if r is None else make_se(rng, cv.c_out, r, dtype)
            for cv, r in zip(convs, d["se"])
        ]
        return InferenceBlock(stages=convs, se=se, activation=d["activation"])
    if kind == "global_pool":
        return GlobalPoolFlatten()
    if kind == "linear":
        dtype = np.dtype(d["dtype"]).type
        return LinearHead(
            weight=np.zeros((d["classes"], d["features"]), dtype),
            bias=np.zeros(d["classes"], dtype),
        )
    raise FormatError(f"unknown layer kind {kind!r} in model description")


def model_from_descriptor(desc):
    layers = [_layer_from_descriptor(d) for d in desc["layers"]]
    arch = ArchSpec.from_dict(desc["arch"]) if desc.get("arch") else None
    return Model(
        layers=layers,
        name=desc.get("name", "custom"),
        mode=desc.get("mode", "train"),
        input_channels=desc.get("input_channels", 3),
        arch=arch,
    )


# ---------------------------------------------------------------------------
# Container read/write


def _pack_records(tensors):
    records = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr)
        if data.dtype.byteorder == ">":
            data = data.astype(data.dtype.newbyteorder("<"))
        if data.dtype not in _DTYPE_TAGS:
            raise FormatError(f"tensor {name!r} has unsupported dtype {data.dtype}")
        raw = data.tobytes()
        name_bytes = name.encode("utf-8")
        rec = struct.pack("<I", len(name_bytes)) + name_bytes
        rec += struct.pack("<BB", _DTYPE_TAGS[data.dtype], data.ndim)
        rec += struct.pack(f"<{data.ndim}I", *data.shape)
        rec += struct.pack("<Q", offset)
        records.append(rec)
        blobs.append(raw)
        offset += len(raw)
    return b"".join(records), b"".join(blobs)


def save_model(model, path):
    """Write a model (weights + structure) to ``path`` plus a JSON sidecar."""
    path = Path(path)
    desc = describe_model(model)
    meta = np.frombuffer(
        json.dumps(desc, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    tensors = [(META_NAME, meta)] + list(model.named_tensors())
    names = [n for n, _ in tensors]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names in model")
    header, payload = _pack_records(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        fh.write(header)
        fh.write(payload)
    sidecar = {
        "magic": MAGIC.decode("ascii"),
        "version": VERSION,
        "model": desc,
        "tensors": [
            {"name": n, "dtype": str(a.dtype), "shape": list(a.shape)}
            for n, a in tensors
        ],
    }
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated container while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensors(path):
    """Read the raw name -> array map from a container file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    rd = _Reader(buf)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError(f"{path} is not a weight container (bad magic)")
    (version, count) = rd.unpack("<II", "version header")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    entries = []
    for i in range(count):
        (name_len,) = rd.unpack("<I", f"record {i} name length")
        if name_len > 4096:
            raise FormatError(f"record {i} name length {name_len} is implausible")
        name = rd.take(name_len, f"record {i} name").decode("utf-8")
        tag, rank = rd.unpack("<BB", f"record {i} dtype/rank")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"record {name!r} has unknown dtype tag {tag}")
        if rank > 4:
            raise FormatError(f"record {name!r} has unsupported rank {rank}")
        shape = rd.unpack(f"<{rank}I", f"record {name!r} dims") if rank else ()
        (offset,) = rd.unpack("<Q", f"record {name!r} offset")
        entries.append((name, _TAG_DTYPES[tag], shape, offset))
    data = buf[rd.pos :]
    tensors = {}
    for name, dtype, shape, offset in entries:
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r} in container")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if offset + nbytes > len(data):
            raise FormatError(
                f"tensor {name!r} (offset {offset}, {nbytes} bytes) runs past "
                f"the end of the data section ({len(data)} bytes)"
            )
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        tensors[name] = arr.reshape(shape).copy()
    return tensors


def load_model(path):
    """Rebuild a model from a container file.

    The structure record is decoded first, a zero skeleton is built, and
    every stored tensor is copied in by name; a missing or mis-shaped
    tensor aborts with :class:`FormatError` before any partially filled
    model escapes.
    """
    tensors = read_tensors(path)
    if META_NAME not in tensors:
        raise FormatError(f"container lacks the {META_NAME!r} structure record")
    try:
        desc = json.loads(tensors.pop(META_NAME).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"structure record is not valid JSON: {exc}") from None
    model = model_from_descriptor(desc)
    expected = dict(model.named_tensors())
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise FormatError(
            f"container does not match its own structure record "
            f"(missing: {missing[:5]}, unexpected: {extra[:5]})"
        )
    for name, arr in expected.items():
        stored = tensors[name]
        if stored.shape != arr.shape or stored.dtype != arr.dtype:
            raise FormatError(
                f"tensor {name!r}: stored {stored.dtype}{stored.shape}, "
                f"structure expects {arr.dtype}{arr.shape}"
            )
        arr[...] = stored
    return model
