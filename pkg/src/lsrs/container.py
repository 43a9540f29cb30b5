"""Versioned binary containers shared by all on-disk artifacts.

Layout: magic "LSRS" | u16 format version | u32 manifest length | manifest
(UTF-8 JSON, carries a "kind" tag plus arbitrary metadata and the array
directory) | raw array payloads in directory order, little-endian.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable

import numpy as np

MAGIC = b"LSRS"
FORMAT_VERSION = 1

_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "u2": np.dtype("<u2"),
    "i4": np.dtype("<i4"),
}


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, manifest: dict, arrays: Iterable[tuple]) -> None:
    """Write atomically (tmp file + rename); partial output never survives."""
    arrays = list(arrays)
    directory = []
    payloads = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        code = None
        for c, dt in _DTYPES.items():
            if arr.dtype == dt:
                code = c
                break
        if code is None:
            raise ContainerError(f"array {name!r}: unsupported dtype {arr.dtype}")
        if not np.issubdtype(arr.dtype, np.integer) and not np.all(np.isfinite(arr)):
            raise ContainerError(f"array {name!r}: non-finite values")
        directory.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())

    header = dict(manifest)
    header["kind"] = kind
    header["arrays"] = directory
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = str(path) + ".tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(FORMAT_VERSION.to_bytes(2, "little"))
            f.write(len(blob).to_bytes(4, "little"))
            f.write(blob)
            for payload in payloads:
                f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_container(path, expect_kind: str | None = None):
    """Returns (manifest, {name: array}). Validates magic/version/shapes."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version = int.from_bytes(f.read(2), "little")
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        blob_len = int.from_bytes(f.read(4), "little")
        manifest = json.loads(f.read(blob_len).decode("utf-8"))
        if expect_kind is not None and manifest.get("kind") != expect_kind:
            raise ContainerError(
                f"{path}: kind {manifest.get('kind')!r}, expected {expect_kind!r}"
            )
        arrays = {}
        for entry in manifest["arrays"]:
            dt = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * dt.itemsize)
            if len(raw) != count * dt.itemsize:
                raise ContainerError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return manifest, arrays


def content_hash(path) -> str:
    """64-bit content hash (hex) used to pin artifacts in stage manifests."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()
