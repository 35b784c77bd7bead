"""Binary tensor archive shared by checkpoints and datasets.

Layout (little-endian)::

    b"CWFA" | u32 version | u64 header_len | header (UTF-8 JSON) | payloads

The header is ``{"entries": [{"name", "dtype", "shape"}, ...]}``. Payloads follow
in header order, each starting on an 8-byte boundary of the file. ``dtype`` is
``"f32"`` for tensors or ``"json"`` for UTF-8 JSON documents (shape = [n_bytes]).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CWFA"
VERSION = 1
_ALIGN = 8


class ArchiveError(ValueError):
    """Malformed, truncated or unsupported archive."""


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def save_archive(path, entries: Mapping[str, Any]) -> None:
    """Write ``entries`` (name -> array-like or JSON-able dict/list) in insertion order."""
    header, blobs = [], []
    for name, value in entries.items():
        if isinstance(value, (dict, list, str)) and not isinstance(value, np.ndarray):
            raw = json.dumps(value, sort_keys=True).encode("utf-8")
            header.append({"name": name, "dtype": "json", "shape": [len(raw)]})
        else:
            arr = np.asarray(_to_numpy(value), dtype="<f4")
            raw = arr.tobytes()
            header.append({"name": name, "dtype": "f32", "shape": list(arr.shape)})
        blobs.append(raw)
    head = json.dumps({"entries": header}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(head)))
        fh.write(head)
        pos = len(MAGIC) + 12 + len(head)
        for raw in blobs:
            fh.write(b"\0" * _pad(pos))
            pos += _pad(pos)
            fh.write(raw)
            pos += len(raw)


def load_archive(path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ArchiveError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise ArchiveError(f"{path}: truncated header")
    version, head_len = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version} (this build reads {VERSION})")
    pos = 16
    if pos + head_len > len(data):
        raise ArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + head_len].decode("utf-8"))
        header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{path}: unreadable header ({exc})") from None
    pos += head_len
    out: dict[str, Any] = {}
    for entry in header["entries"]:
        pos += _pad(pos)
        shape = tuple(entry["shape"])
        kind = entry["dtype"]
        if kind not in ("json", "f32"):
            raise ArchiveError(f"{path}: unknown dtype {kind!r} for {entry['name']!r}")
        n = shape[0] if kind == "json" else 4 * int(np.prod(shape, dtype=np.int64))
        if pos + n > len(data):
            raise ArchiveError(f"{path}: payload for {entry['name']!r} is truncated")
        if kind == "json":
            out[entry["name"]] = json.loads(data[pos : pos + n].decode("utf-8"))
        else:
            out[entry["name"]] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += n
    return out


def _to_numpy(value):
    if hasattr(value, "detach"):
        return value.detach().cpu().numpy()
    return value
