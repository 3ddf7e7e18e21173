"""Checkpoint files: a text manifest plus one flat little-endian float64 blob.

Manifest layout (UTF-8, one entry per line)::

    format-version 1
    config {"json": "object"}
    tensor <name> <dim0,dim1,...> <offset>

Offsets count float64 elements from the start of ``blob.bin``. Scalars use
the shape ``-``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError, VersionError

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "blob.bin"
_DTYPE = np.dtype("<f8")


def save(directory, config: dict, tensors: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format-version {FORMAT_VERSION}", "config " + json.dumps(config, sort_keys=True)]
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise InputError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(tensors[name], dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE).reshape(-1))
        offset += arr.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=_DTYPE)
    (directory / BLOB).write_bytes(blob.astype(_DTYPE, copy=False).tobytes())
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    blob_path = directory / BLOB
    if not blob_path.exists():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("format-version "):
        raise InputError(f"{manifest}: missing format-version line")
    version = int(lines[0].split()[1])
    if version != FORMAT_VERSION:
        raise VersionError(f"{manifest}: format version {version}, expected {FORMAT_VERSION}")
    blob = np.frombuffer(blob_path.read_bytes(), dtype=_DTYPE)
    config: dict = {}
    tensors: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("config "):
            config = json.loads(line[len("config "):])
        elif line.startswith("tensor "):
            _, name, shape_s, off_s = line.split()
            shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
            off = int(off_s)
            size = int(np.prod(shape)) if shape else 1
            if off + size > blob.size:
                raise InputError(f"{manifest}:{lineno}: tensor {name} runs past end of blob")
            tensors[name] = blob[off:off + size].astype(np.float64).reshape(shape)
        elif line.strip():
            raise InputError(f"{manifest}:{lineno}: unrecognized entry")
    return config, tensors
