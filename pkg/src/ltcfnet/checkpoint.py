"""Checkpoint files: a plain-text header followed by raw tensor data.

Layout::

    LTCFNET-CHECKPOINT <version>\\n
    <header byte length>\\n
    <JSON header: kind, config, tensor table, crc32>\\n
    <little-endian float32 tensors, concatenated in table order>

The header is human readable (``head -c 4096 file`` shows the config).
"""
from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import (CheckpointCorruptError, CheckpointShapeError, CheckpointVersionError,
                     ConfigError)

MAGIC = "LTCFNET-CHECKPOINT"
VERSION = 1
_DTYPE = np.dtype("<f4")


def write_tensors(path, tensors: dict, meta: dict | None = None):
    """Write ``{name: array}`` with an optional metadata dict in the header."""
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPE)
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    blob = b"".join(blobs)
    header = dict(meta or {})
    header.update({"tensors": table, "nbytes": len(blob), "crc32": zlib.crc32(blob)})
    text = json.dumps(header, indent=1, sort_keys=True).encode("utf-8") + b"\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(blob)
    return path


def _read_line(fh, what):
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise CheckpointCorruptError(f"truncated or malformed {what} line")
    return line[:-1].decode("ascii", errors="replace")


def read_tensors(path):
    """Return (header dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        first = _read_line(fh, "magic").split(" ")
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointCorruptError(f"{path}: not a checkpoint file")
        try:
            version = int(first[1])
        except ValueError:
            raise CheckpointCorruptError(f"{path}: unreadable version {first[1]!r}") from None
        if version != VERSION:
            raise CheckpointVersionError(f"{path}: format version {version}, this build reads {VERSION}")
        try:
            size = int(_read_line(fh, "header length"))
            header = json.loads(fh.read(size).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointCorruptError(f"{path}: bad header ({exc})") from None
        blob = fh.read()
    if not isinstance(header, dict) or "tensors" not in header:
        raise CheckpointCorruptError(f"{path}: header has no tensor table")
    if len(blob) != header.get("nbytes") or zlib.crc32(blob) != header.get("crc32"):
        raise CheckpointCorruptError(f"{path}: tensor data truncated or checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + count * _DTYPE.itemsize > len(blob):
            raise CheckpointCorruptError(f"{path}: tensor {entry['name']} runs past end of data")
        tensors[entry["name"]] = np.frombuffer(blob, _DTYPE, count, start).reshape(shape).copy()
    return header, tensors


def assign_tensors(params: dict, tensors: dict):
    """Copy arrays into parameters by name; names and shapes must match exactly."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise ConfigError(f"checkpoint does not match the model: missing {missing[:5]}, "
                          f"unexpected {extra[:5]}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointShapeError(f"{name}: checkpoint shape {arr.shape}, model shape {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
        p.grad = np.zeros_like(p.data)


def save_checkpoint(net, path, extra: dict | None = None):
    meta = {"kind": "ltcfnet", "config": net.config.to_dict()}
    if extra:
        meta["extra"] = extra
    return write_tensors(path, net.state(), meta)


def load_checkpoint(path, expected=None):
    """Rebuild the network stored in ``path``.

    If ``expected`` (a ModelConfig) is given, its architecture fields must
    agree with the stored config, else ConfigError.
    """
    from .model import ModelConfig, build
    header, tensors = read_tensors(path)
    if header.get("kind") != "ltcfnet" or "config" not in header:
        raise CheckpointCorruptError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(header["config"])
    if expected is not None:
        ours, theirs = expected.to_dict(), config.to_dict()
        diff = sorted(k for k in ours if k != "seed" and ours[k] != theirs[k])
        if diff:
            raise ConfigError("checkpoint config differs in " + ", ".join(
                f"{k} (file {theirs[k]!r}, expected {ours[k]!r})" for k in diff))
    net = build(config)
    assign_tensors(dict(net.named_parameters()), tensors)
    return net
