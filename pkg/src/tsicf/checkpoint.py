"""Checkpoint files: a text manifest plus a raw little-endian float64 blob.

The manifest is ``key = value`` lines::

    format = tsicf-checkpoint
    version = 1
    endianness = little
    dtype = float64
    blob = model.ckpt.bin
    blob_bytes = 123456
    blob_sha256 = ...
    config.p = 8
    meta.step = 500
    tensor.input.hidden.w = shape=8x64 offset=0

Offsets are in bytes into the blob; tensors are stored back to back in
manifest order.  Both files are written to temporaries and renamed into place.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError
from .model import SEPARATOR, ModelConfig, ModelParams, init_param

__all__ = ["save_checkpoint", "load_checkpoint", "read_checkpoint", "write_atomic"]

FORMAT = "tsicf-checkpoint"
VERSION = "1"
LE_F8 = np.dtype("<f8")


def write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _blob_path(path: Path) -> Path:
    return path.with_name(path.name + ".bin")


def save_checkpoint(
    params: ModelParams | Mapping[str, np.ndarray],
    cfg: ModelConfig,
    path,
    extra: Mapping[str, np.ndarray] | None = None,
    meta: Mapping[str, str] | None = None,
) -> Path:
    """Write ``path`` (manifest) and ``path.bin`` (tensor blob)."""
    path = Path(path)
    tensors = dict(params.items())
    for k, v in (extra or {}).items():
        if k in tensors:
            raise CheckpointError(f"duplicate tensor name {k!r}")
        tensors[k] = v
    lines = [
        f"format = {FORMAT}",
        f"version = {VERSION}",
        "endianness = little",
        "dtype = float64",
    ]
    chunks, offset = [], 0
    tensor_lines = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=LE_F8)
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        tensor_lines.append(f"tensor.{name} = shape={shape} offset={offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    lines += [
        f"blob = {_blob_path(path).name}",
        f"blob_bytes = {len(blob)}",
        f"blob_sha256 = {hashlib.sha256(blob).hexdigest()}",
    ]
    lines += [f"config.{k} = {v}" for k, v in cfg.to_dict().items()]
    lines += [f"meta.{k} = {v}" for k, v in (meta or {}).items()]
    lines += tensor_lines
    write_atomic(_blob_path(path), blob)
    write_atomic(path, ("\n".join(lines) + "\n").encode())
    return path


def _parse_manifest(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if " = " not in line:
            raise CheckpointError(f"manifest line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split(" = ", 1)
        if key in entries:
            raise CheckpointError(f"manifest line {lineno}: duplicate key {key!r}")
        entries[key] = value
    for key, want in (("format", FORMAT), ("version", VERSION), ("endianness", "little"), ("dtype", "float64")):
        if entries.get(key) != want:
            raise CheckpointError(f"manifest {key!r} must be {want!r}, got {entries.get(key)!r}")
    return entries


def _parse_config(entries: Mapping[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in entries:
            raise CheckpointError(f"manifest lacks {key}")
        raw = entries[key]
        try:
            kwargs[f.name] = raw if f.name == "activation" else int(raw)
        except ValueError:
            raise CheckpointError(f"manifest {key} is not an integer: {raw!r}") from None
    try:
        return ModelConfig(**kwargs)
    except ValueError as err:
        raise CheckpointError(f"manifest config invalid: {err}") from None


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict[str, str]]:
    """Parse a checkpoint into (all tensors, stored config, meta fields)."""
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as err:
        raise CheckpointError(f"cannot read manifest {path}: {err}") from err
    entries = _parse_manifest(text)
    cfg = _parse_config(entries)
    blob_path = path.with_name(entries.get("blob", ""))
    try:
        blob = blob_path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read blob {blob_path}: {err}") from err
    if str(len(blob)) != entries.get("blob_bytes"):
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {entries.get('blob_bytes')}")
    if hashlib.sha256(blob).hexdigest() != entries.get("blob_sha256"):
        raise CheckpointError("blob checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    for key, value in entries.items():
        if not key.startswith("tensor."):
            continue
        name = key[len("tensor."):]
        try:
            parts = dict(item.split("=", 1) for item in value.split())
            shape = () if parts["shape"] == "scalar" else tuple(int(s) for s in parts["shape"].split("x"))
            offset = int(parts["offset"])
        except (KeyError, ValueError):
            raise CheckpointError(f"malformed tensor entry {key!r}: {value!r}") from None
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * LE_F8.itemsize
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"tensor {name!r} lies outside the blob")
        tensors[name] = np.frombuffer(blob, dtype=LE_F8, count=count, offset=offset).astype(np.float64).reshape(shape)
    meta = {k[len("meta."):]: v for k, v in entries.items() if k.startswith("meta.")}
    return tensors, cfg, meta


def load_checkpoint(path, cfg: ModelConfig | None = None, seed: int = 0) -> tuple[ModelParams, ModelConfig]:
    """Load model weights, validating every shape against ``cfg``.

    A checkpoint without a separator embedding (a history-only base model) is
    accepted; the separator is then freshly initialized from ``seed``.
    """
    tensors, stored, _ = read_checkpoint(path)
    cfg = cfg or stored
    params = ModelParams()
    for name, shape in cfg.param_shapes().items():
        if name not in tensors:
            if name == SEPARATOR:
                params[name] = init_param(name, shape, np.random.default_rng(seed))
                continue
            raise CheckpointError(f"checkpoint {path} lacks tensor {name!r}")
        got = tensors[name].shape
        if got != shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {got} != config shape {shape}")
        params[name] = tensors[name]
    return params, cfg
