"""Bit-exact checkpoint container.

Layout: 8-byte magic, u64 little-endian manifest length, JSON manifest
(canonical form: sorted keys, no spaces), then one contiguous payload of
raw little-endian IEEE-754 tensor data. The manifest lists model config,
adaptation metadata, and every tensor's name/dtype/shape/offset/length.

Saving a loaded model reproduces the file byte for byte: the manifest is
rebuilt canonically from model state and tensor bytes are copied verbatim.
"""

import json
import struct

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, TransformerLm
from .router import Router
from .tensor import Tensor

MAGIC = b"NESTMOE\x01"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _manifest_for(model: TransformerLm):
    tensors = []
    offset = 0
    arrays = []
    for name, t in model.named_params():
        arr = np.ascontiguousarray(t.data)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        tensors.append({
            "name": name,
            "dtype": dtype,
            "shape": [int(s) for s in arr.shape],
            "offset": offset,
            "nbytes": int(arr.nbytes),
        })
        offset += arr.nbytes
        arrays.append(arr)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "adapted" if model.widths is not None else "dense",
        "precision": np.dtype(model.dtype).newbyteorder("<").str,
        "model": model.config.to_dict(),
        "meta": model.meta,
        "widths": None if model.widths is None else [int(w) for w in model.widths],
        "payload_nbytes": offset,
        "tensors": tensors,
    }
    return manifest, arrays


def save_checkpoint(model: TransformerLm, path):
    manifest, arrays = _manifest_for(model)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(arr.tobytes())
    return path


def load_checkpoint(path) -> TransformerLm:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_end = len(MAGIC) + 8 + mlen
    if header_end > len(raw):
        raise CheckpointError(f"{path}: manifest length {mlen} overruns the file")
    try:
        manifest = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}")
    payload = raw[header_end:]

    config = ModelConfig(**manifest["model"])
    precision = manifest.get("precision", "<f4")
    if precision not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported precision {precision!r}")
    model = TransformerLm(config, dtype=_DTYPES[precision], init=False)
    model.meta = dict(manifest.get("meta", {}))

    loaded = {}
    cursor = 0
    for spec in manifest["tensors"]:
        name = spec["name"]
        if spec["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype {spec['dtype']}")
        dtype = _DTYPES[spec["dtype"]]
        shape = tuple(spec["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != spec["nbytes"]:
            raise CheckpointError(
                f"{path}: tensor {name!r} length {spec['nbytes']} does not match shape {shape}")
        if spec["offset"] != cursor:
            raise CheckpointError(
                f"{path}: tensor {name!r} offset {spec['offset']} overlaps or leaves a gap")
        end = cursor + spec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated inside tensor {name!r}")
        arr = np.frombuffer(payload[cursor:end], dtype=dtype).reshape(shape).copy()
        loaded[name] = Tensor(arr, requires_grad=True)
        cursor = end
    if cursor != len(payload):
        raise CheckpointError(
            f"{path}: payload has {len(payload) - cursor} trailing bytes beyond the manifest")

    widths = manifest.get("widths")
    router_names = {n for n in loaded if ".router." in n}
    model.params = {n: t for n, t in loaded.items() if n not in router_names}
    if widths is not None:
        model.widths = [int(w) for w in widths]
        nonlinearity = model.meta.get("router_nonlinearity", "relu")
        routers = []
        for i in range(config.num_layers):
            try:
                w1 = loaded[f"layers.{i}.router.w1"]
                w2 = loaded[f"layers.{i}.router.w2"]
            except KeyError as exc:
                raise CheckpointError(f"{path}: adapted checkpoint missing tensor {exc}") from exc
            r = Router.__new__(Router)
            r.nonlinearity = nonlinearity
            r.w1, r.w2 = w1, w2
            routers.append(r)
        model.routers = routers
    elif router_names:
        raise CheckpointError(f"{path}: router tensors present but no expert widths recorded")
    return model
