"""Directory container shared by datasets and checkpoints.

A container is a directory with ``manifest.json`` and ``data.bin``. The blob
starts with the magic ``PMFN`` and a little-endian u32 format version, followed
by raw row-major little-endian floats in the manifest's ``shape``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PMFN"
FORMAT_VERSION = 1
DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ContainerError(Exception):
    code = "container"


class BadMagicError(ContainerError):
    code = "bad_magic"


class VersionMismatchError(ContainerError):
    code = "version_mismatch"


class TruncatedBlobError(ContainerError):
    code = "truncated_blob"


class ShapeMismatchError(ContainerError):
    code = "shape_mismatch"


class HashMismatchError(ContainerError):
    code = "hash_mismatch"


def fnv1a64(rows):
    """FNV-1a 64-bit hash of each row's bytes, returned as 16-digit hex strings.

    ``rows`` is a 2-D uint8 array; all rows are hashed in lockstep.
    """
    rows = np.ascontiguousarray(rows, dtype=np.uint8)
    if rows.ndim == 1:
        rows = rows[None, :]
    h = np.full(rows.shape[0], FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    cols = rows.astype(np.uint64).T
    for col in cols:
        h ^= col
        h *= prime
    return [f"{int(v):016x}" for v in h]


def fnv1a64_bytes(data: bytes):
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def sample_hashes(array, dtype="f32le"):
    a = np.ascontiguousarray(array, dtype=DTYPES[dtype])
    return fnv1a64(a.reshape(a.shape[0], -1).view(np.uint8))


def write(path, manifest, array, dtype="f32le"):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype=DTYPES[dtype])
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["shape"] = list(arr.shape)
    manifest["dtype"] = dtype
    manifest["blob_bytes"] = arr.nbytes
    tmp = path / "data.bin.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(arr.tobytes())
    os.replace(tmp, path / "data.bin")
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (path / "manifest.json").write_text(text, encoding="utf-8")
    return manifest


def read_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ContainerError(f"{path}: missing manifest.json") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: manifest format_version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def read(path):
    """Return ``(manifest, array)``; the array keeps the stored dtype."""
    path = Path(path)
    manifest = read_manifest(path)
    dtype = DTYPES.get(manifest.get("dtype"))
    if dtype is None:
        raise ContainerError(f"{path}: unknown dtype {manifest.get('dtype')!r}")
    raw = (path / "data.bin").read_bytes()
    if len(raw) < 8:
        raise TruncatedBlobError(f"{path}: blob shorter than its header")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: blob version {version} != {FORMAT_VERSION}")
    shape = tuple(int(s) for s in manifest["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = len(raw) - 8
    recorded = manifest.get("blob_bytes", expected)
    if payload != recorded:
        raise TruncatedBlobError(f"{path}: blob has {payload} bytes, manifest records {recorded}")
    if payload != expected:
        raise ShapeMismatchError(
            f"{path}: manifest shape {list(shape)} needs {expected} bytes, blob has {payload}")
    array = np.frombuffer(raw, dtype=dtype, offset=8).reshape(shape)
    return manifest, array
