"""On-disk containers for models and calibration sets, plus atomic writes.

A model directory holds ``manifest.json`` (layer list with kinds, shapes and
byte offsets) and ``weights.bin`` (little-endian float32, layer order,
row-major). A calibration directory holds ``manifest.json``, ``inputs.bin``
(float32) and ``labels.bin`` (int32).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .tensorcore import Batch, Layer, ModelGraph

MODEL_FORMAT = "mixprec-model/1"
CALIB_FORMAT = "mixprec-calibration/1"

_F32 = np.dtype("<f4")
_I32 = np.dtype("<i4")


class DataError(Exception):
    """A file is missing, unreadable or inconsistent with its manifest."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dump_json(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_model(model: ModelGraph, directory) -> None:
    directory = Path(directory)
    blobs, entries, offset = [], [], 0
    for layer in model.layers:
        tensors = {}
        for name in ("weights", "bias", "coef"):
            arr = getattr(layer, name)
            if arr is None:
                continue
            raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
            tensors[name] = {"offset": offset, "nbytes": len(raw), "shape": list(arr.shape)}
            blobs.append(raw)
            offset += len(raw)
        entry = {"id": layer.id, "kind": layer.kind, "tensors": tensors}
        if layer.weights is not None:
            entry["dims"] = list(layer.weights.shape)
        entries.append(entry)
    atomic_write_bytes(directory / "weights.bin", b"".join(blobs))
    write_json(directory / "manifest.json", {"format": MODEL_FORMAT, "layers": entries})


def load_model(directory) -> ModelGraph:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != MODEL_FORMAT:
        raise DataError(f"{directory}/manifest.json: unexpected format {manifest.get('format')!r}")
    try:
        blob = (directory / "weights.bin").read_bytes()
    except FileNotFoundError:
        raise DataError(f"{directory}/weights.bin: file not found") from None
    layers = []
    for entry in manifest["layers"]:
        arrays = {}
        for name, info in entry.get("tensors", {}).items():
            start, nbytes = info["offset"], info["nbytes"]
            if start + nbytes > len(blob):
                raise DataError(f"{directory}/weights.bin: layer {entry['id']!r} {name} out of range")
            arr = np.frombuffer(blob, dtype=_F32, count=nbytes // 4, offset=start)
            arrays[name] = arr.reshape(info["shape"]).astype(np.float32)
        layers.append(Layer(entry["id"], entry["kind"], **arrays))
    return ModelGraph(layers)


def save_calibration(batch: Batch, directory) -> None:
    directory = Path(directory)
    atomic_write_bytes(directory / "inputs.bin", np.ascontiguousarray(batch.inputs, _F32).tobytes())
    atomic_write_bytes(directory / "labels.bin", np.ascontiguousarray(batch.labels, _I32).tobytes())
    write_json(
        directory / "manifest.json",
        {
            "format": CALIB_FORMAT,
            "sample_count": len(batch),
            "input_dim": int(batch.inputs.shape[1]),
            "inputs": "inputs.bin",
            "labels": "labels.bin",
        },
    )


def load_calibration(directory) -> Batch:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != CALIB_FORMAT:
        raise DataError(f"{directory}/manifest.json: unexpected format {manifest.get('format')!r}")
    n, d = manifest["sample_count"], manifest["input_dim"]
    try:
        inputs = np.fromfile(directory / manifest["inputs"], dtype=_F32)
        labels = np.fromfile(directory / manifest["labels"], dtype=_I32)
    except FileNotFoundError as exc:
        raise DataError(f"{exc.filename}: file not found") from None
    if inputs.size != n * d or labels.size != n:
        raise DataError(f"{directory}: data size does not match manifest ({n} x {d})")
    return Batch(inputs.reshape(n, d).astype(np.float32), labels.astype(np.int64))
