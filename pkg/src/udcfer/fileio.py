"""Bit-exact on-disk formats: TNSR tensors, dataset directories,
checkpoints, metrics JSONL, predictions CSV.

Everything is little-endian and written atomically (temp file in the
destination directory, then ``os.replace``), so a crashed run never
leaves a half-written artifact behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import DataError

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {"f32": 1, "f64": 2}

FORMAT_VERSION = 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: str) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}") from e


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return h.hexdigest()


# ---------------------------------------------------------------------------
# TNSR container
# ---------------------------------------------------------------------------


def tnsr_bytes(array: np.ndarray, dtype: str = "f64") -> bytes:
    """Serialize an array: magic, u32 version, u8 dtype, u8 rank, dims, payload."""
    if dtype not in _CODE_FOR:
        raise DataError(f"unsupported TNSR dtype '{dtype}'")
    code = _CODE_FOR[dtype]
    # note: ascontiguousarray would promote rank-0 to rank-1
    arr = np.asarray(array, dtype=_DTYPE_CODES[code])
    if arr.ndim > 255:
        raise DataError("TNSR rank limit is 255")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return header + dims + arr.tobytes(order="C")


def write_tnsr(path: str, array: np.ndarray, dtype: str = "f64") -> str:
    """Write atomically; returns the payload sha256 (of the whole file)."""
    payload = tnsr_bytes(array, dtype)
    atomic_write_bytes(path, payload)
    return sha256_bytes(payload)


def tnsr_from_bytes(payload: bytes, path: str = "<bytes>") -> np.ndarray:
    if len(payload) < 10:
        raise DataError(f"{path}: truncated TNSR header")
    if payload[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {payload[:4]!r}")
    version, code, rank = struct.unpack_from("<IBB", payload, 4)
    if version != VERSION:
        raise DataError(f"{path}: unknown TNSR version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown TNSR dtype code {code}")
    off = 10
    if len(payload) < off + 8 * rank:
        raise DataError(f"{path}: truncated TNSR dims")
    dims = struct.unpack_from(f"<{rank}Q", payload, off) if rank else ()
    off += 8 * rank
    dt = _DTYPE_CODES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = off + n * dt.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload length {len(payload)} != expected {expected}")
    arr = np.frombuffer(payload, dtype=dt, count=n, offset=off).reshape(dims)
    return arr.copy()


def read_tnsr(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    return tnsr_from_bytes(payload, path)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

_DATASET_FIELDS = ("images", "udc", "landmarks", "labels")


def save_dataset_dir(directory: str, arrays: Dict[str, np.ndarray], meta: dict) -> dict:
    """Write one TNSR per field plus a manifest with checksums."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name in _DATASET_FIELDS:
        if name not in arrays:
            raise DataError(f"dataset missing field '{name}'")
        fname = f"{name}.tnsr"
        digest = write_tnsr(os.path.join(directory, fname),
                            arrays[name], "f64" if name == "labels" else "f32")
        files[fname] = digest
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "files": files,
    }
    manifest.update(meta)
    write_json(os.path.join(directory, "manifest.json"), manifest)
    return manifest


def load_dataset_dir(directory: str, verify: bool = True) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest = read_json(os.path.join(directory, "manifest.json"))
    if manifest.get("kind") != "dataset":
        raise DataError(f"{directory}: manifest kind is not 'dataset'")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{directory}: unsupported dataset format_version")
    arrays = {}
    for name in _DATASET_FIELDS:
        fname = f"{name}.tnsr"
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            raise DataError(f"{directory}: missing tensor file {fname}")
        if verify:
            want = manifest.get("files", {}).get(fname)
            if want is None:
                raise DataError(f"{directory}: manifest lists no checksum for {fname}")
            got = sha256_file(path)
            if got != want:
                raise DataError(f"{directory}/{fname}: checksum mismatch")
        arrays[name] = read_tnsr(path)
    return arrays, manifest


def dataset_checksum(manifest: dict) -> str:
    return sha256_bytes(canonical_json(manifest.get("files", {})).encode("utf-8"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory: str, arrays: Dict[str, np.ndarray],
                    config_sha256: str, epr_dim: int, timesteps: int,
                    extra: Optional[dict] = None) -> dict:
    """One f32 TNSR per parameter plus a manifest; storage is float32."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        fname = name + ".tnsr"
        digest = write_tnsr(os.path.join(directory, fname), arrays[name], "f32")
        entries.append({
            "name": name,
            "shape": list(arrays[name].shape),
            "dtype": "f32",
            "sha256": digest,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "config_sha256": config_sha256,
        "epr_dim": int(epr_dim),
        "timesteps": int(timesteps),
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    write_json(os.path.join(directory, "manifest.json"), manifest)
    return manifest


def load_checkpoint(directory: str, verify: bool = True) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest = read_json(os.path.join(directory, "manifest.json"))
    if manifest.get("kind") != "checkpoint":
        raise DataError(f"{directory}: manifest kind is not 'checkpoint'")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{directory}: unsupported checkpoint format_version")
    arrays = {}
    for entry in manifest["params"]:
        name = entry["name"]
        path = os.path.join(directory, name + ".tnsr")
        if not os.path.exists(path):
            raise DataError(f"{directory}: missing parameter file for '{name}'")
        if verify and sha256_file(path) != entry["sha256"]:
            raise DataError(f"{directory}: checksum mismatch for '{name}'")
        arr = read_tnsr(path)
        if list(arr.shape) != list(entry["shape"]):
            raise DataError(f"{directory}: shape mismatch for '{name}'")
        arrays[name] = arr.astype(np.float64)
    return arrays, manifest


def checkpoint_checksum(directory: str) -> str:
    """Order-independent digest over (name, sha256) of every stored tensor."""
    manifest = read_json(os.path.join(directory, "manifest.json"))
    pairs = sorted((e["name"], e["sha256"]) for e in manifest.get("params", []))
    return sha256_bytes(canonical_json(pairs).encode("utf-8"))


# ---------------------------------------------------------------------------
# metrics / predictions
# ---------------------------------------------------------------------------


class JsonlWriter:
    """Append-only JSON Lines writer with canonical key order."""

    def __init__(self, path: str):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.path = path
        self._f = open(path, "w")

    def write(self, record: dict) -> None:
        self._f.write(canonical_json(record) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_predictions_csv(path: str, indices, preds, labels) -> None:
    lines = ["index,pred,label"]
    for i, p, y in zip(indices, preds, labels):
        lines.append(f"{int(i)},{int(p)},{int(y)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
