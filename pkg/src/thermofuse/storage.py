"""Persistence formats: voxel blobs, dataset manifests, checkpoints, configs.

All formats are deterministic: identical inputs serialize to identical
bytes, so dataset/checkpoint/report trees can be compared byte-for-byte
across runs.

Voxel blob layout (``.thvx``): magic ``THVX`` (4 bytes), format version
(u32 LE), dtype code (u32 LE; 1 = little-endian IEEE-754 float32,
2 = unsigned byte), three dimension fields (u32 LE, order W, L, H), then
the row-major payload of exactly W*L*H elements.

Checkpoint layout (``.tfck``): magic ``TFCK`` (4 bytes), format version
(u32 LE), header length (u32 LE), UTF-8 JSON header (model descriptor plus
ordered parameter name/shape list), then each parameter's float64
little-endian row-major payload in header order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

__all__ = [
    "StorageError", "ConfigError",
    "VOXEL_MAGIC", "VOXEL_VERSION", "DTYPE_F32", "DTYPE_U8",
    "write_voxel_blob", "read_voxel_blob",
    "sha256_bytes", "sha256_file",
    "write_manifest", "read_manifest", "verify_manifest",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
    "save_checkpoint", "load_checkpoint",
    "parse_config", "format_config",
]

VOXEL_MAGIC = b"THVX"
VOXEL_VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

CHECKPOINT_MAGIC = b"TFCK"
CHECKPOINT_VERSION = 1


class StorageError(ValueError):
    """Corrupt, truncated, or mismatched on-disk artifact."""


class ConfigError(ValueError):
    """Malformed experiment configuration."""


# ---------------------------------------------------------------------------
# voxel blobs
# ---------------------------------------------------------------------------

def write_voxel_blob(path: str, voxel: np.ndarray, dtype_code: int) -> None:
    """Serialize a 3D array; float32 for thermal grids, u8 for geometry."""
    if dtype_code not in _DTYPES:
        raise StorageError(f"unknown voxel dtype code {dtype_code}")
    arr = np.ascontiguousarray(voxel, dtype=_DTYPES[dtype_code])
    if arr.ndim != 3:
        raise StorageError(f"voxel must be 3D, got shape {arr.shape}")
    w, l, h = arr.shape
    header = VOXEL_MAGIC + struct.pack("<IIIII", VOXEL_VERSION, dtype_code, w, l, h)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))


def read_voxel_blob(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24 or blob[:4] != VOXEL_MAGIC:
        raise StorageError(f"{path}: not a voxel blob (bad magic)")
    version, dtype_code, w, l, h = struct.unpack("<IIIII", blob[4:24])
    if version != VOXEL_VERSION:
        raise StorageError(f"{path}: unsupported voxel format version {version}")
    if dtype_code not in _DTYPES:
        raise StorageError(f"{path}: unknown dtype code {dtype_code}")
    dtype = _DTYPES[dtype_code]
    expected = w * l * h * dtype.itemsize
    payload = blob[24:]
    if len(payload) != expected:
        raise StorageError(f"{path}: payload is {len(payload)} bytes, "
                           f"expected {expected} for dims ({w},{l},{h})")
    return np.frombuffer(payload, dtype=dtype).reshape(w, l, h).copy()


# ---------------------------------------------------------------------------
# hashing / manifest
# ---------------------------------------------------------------------------

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str, manifest: dict) -> None:
    """JSON with sorted keys and a trailing newline (byte-stable)."""
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def read_manifest(path: str) -> dict:
    if not os.path.exists(path):
        raise StorageError(f"missing manifest: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def verify_manifest(manifest: dict, base_dir: str) -> None:
    """Check that every blob listed under ``hashes`` exists relative to
    base_dir and matches its recorded sha256; raises naming the first
    offender."""
    for rel, expected in sorted(manifest.get("hashes", {}).items()):
        path = os.path.join(base_dir, rel)
        if not os.path.exists(path):
            raise StorageError(f"manifest references missing blob: {path}")
        actual = sha256_file(path)
        if actual != expected:
            raise StorageError(
                f"hash mismatch for {path}: manifest {expected}, file {actual}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, descriptor: dict,
                    params: dict[str, np.ndarray]) -> None:
    """Write a model checkpoint; parameters stored float64, header order is
    sorted by name so serialization is canonical."""
    names = sorted(params)
    arrays = [np.ascontiguousarray(params[n], dtype="<f8") for n in names]
    header = {
        "descriptor": descriptor,
        "params": [{"name": n, "shape": list(a.shape)}
                   for n, a in zip(names, arrays)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for a in arrays:
            f.write(a.tobytes(order="C"))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise StorageError(f"missing checkpoint: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise StorageError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < 12 + header_len:
        raise StorageError(f"{path}: truncated header")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    params: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise StorageError(f"{path}: truncated payload at {spec['name']}")
        params[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise StorageError(f"{path}: {len(blob) - offset} trailing bytes")
    return header["descriptor"], params


# ---------------------------------------------------------------------------
# experiment config (human-readable key = value)
# ---------------------------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; blank lines
    ignored; duplicate or malformed keys are rejected."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"line {ln}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value
    return out


def format_config(config: dict) -> str:
    """Canonical rendering of a config mapping (echoed into output trees)."""
    return "".join(f"{k} = {config[k]}\n" for k in sorted(config))
