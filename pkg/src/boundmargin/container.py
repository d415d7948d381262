"""Manifest-plus-blobs file container used for checkpoints and dataset caches.

Layout: one line of UTF-8 JSON (the manifest, no embedded newlines), a
``\\n`` byte, then the raw little-endian blobs back to back in the order the
manifest lists them. Each manifest blob entry records name, dtype, shape,
offset and byte length relative to the start of the blob section.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

DTYPES = {"f64le": np.dtype("<f8"), "i64le": np.dtype("<i8")}
_DTYPE_NAMES = {np.dtype("<f8"): "f64le", np.dtype("<i8"): "i64le"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(manifest: dict, blobs: list[tuple[str, np.ndarray]]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in blobs:
        arr = np.asarray(arr)
        dtype = np.dtype("<i8") if np.issubdtype(arr.dtype, np.integer) else np.dtype("<f8")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append(
            {"name": name, "dtype": _DTYPE_NAMES[dtype], "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    head = dict(manifest)
    head["blobs"] = entries
    head["blob_bytes"] = offset
    return canonical_json(head).encode("utf-8") + b"\n" + b"".join(chunks)


def write(path, manifest: dict, blobs: list[tuple[str, np.ndarray]]) -> None:
    atomic_write_bytes(path, encode(manifest, blobs))


def decode(payload: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    cut = payload.find(b"\n")
    if cut < 0:
        raise FormatError("container has no manifest terminator")
    try:
        manifest = json.loads(payload[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None
    if not isinstance(manifest, dict) or "blobs" not in manifest:
        raise FormatError("manifest lacks a blob table")
    body = payload[cut + 1 :]
    if len(body) != manifest.get("blob_bytes", -1):
        raise FormatError(f"blob section is {len(body)} bytes, manifest declares {manifest.get('blob_bytes')}")
    arrays = {}
    for entry in manifest["blobs"]:
        dtype = DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected or start < 0 or start + nbytes > len(body):
            raise FormatError(f"blob {entry['name']!r} length does not match its shape")
        arrays[entry["name"]] = np.frombuffer(body, dtype=dtype, count=expected // dtype.itemsize, offset=start).reshape(shape).astype(dtype.newbyteorder("="))
    return manifest, arrays


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
