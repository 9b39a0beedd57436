"""Bit-exact tensor container, checkpoint archive, and dataset manifest.

The on-disk formats (shared with the feature exporter):

PFTN tensor container, one tensor per container, containers concatenable:
    magic "PFTN" | version u32 LE (=1) | dtype u8 (0=f32, 1=f64) | ndim u8
    | dims, each u64 LE | payload, little-endian row-major scalars

PFCK checkpoint archive:
    magic "PFCK" | version u32 LE (=1) | header length u64 LE
    | UTF-8 JSON header (config, rng seed, tensor directory with
      name/dtype/dims/offset, offsets relative to the payload region)
    | concatenated little-endian payloads

Manifest: a JSON file
    {"split": "train|test", "entries": [{"feature_path": ..., "label":
     "normal|anomalous", "mask_path": null|..., "image_id": ...}]}
with paths stored relative to the manifest's directory. The train split may
only contain normal entries.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import DataError

PFTN_MAGIC = b"PFTN"
PFCK_MAGIC = b"PFCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_NAME_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}


def _validate_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported tensor dtype {t.dtype}; only f32/f64 are stored")
    if t.ndim < 1:
        raise DataError("tensors must have ndim >= 1")
    if any(d < 1 for d in t.shape):
        raise DataError(f"tensor extents must all be >= 1, got shape {t.shape}")
    return t


def write_tensor(t: np.ndarray, dest: BinaryIO) -> int:
    """Write one PFTN container to a binary sink; returns the byte count."""
    t = _validate_tensor(t)
    header = PFTN_MAGIC + struct.pack("<IBB", FORMAT_VERSION, _DTYPE_CODES[t.dtype], t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
    dest.write(header)
    dest.write(dims)
    dest.write(payload)
    return len(header) + len(dims) + len(payload)


def _read_exact(src: BinaryIO, n: int, what: str) -> bytes:
    buf = src.read(n)
    if buf is None or len(buf) != n:
        raise DataError(f"truncated tensor container while reading {what}")
    return buf


def read_tensor(src: BinaryIO) -> np.ndarray:
    """Read one PFTN container from a binary source; payload is not converted."""
    magic = _read_exact(src, 4, "magic")
    if magic != PFTN_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {PFTN_MAGIC!r}")
    version, dtype_code, ndim = struct.unpack("<IBB", _read_exact(src, 6, "header"))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported container version {version}")
    if dtype_code not in _CODE_DTYPES:
        raise DataError(f"unsupported dtype code {dtype_code}")
    if ndim < 1:
        raise DataError("tensor ndim must be >= 1")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(src, 8 * ndim, "dims"))
    if any(d < 1 for d in dims):
        raise DataError(f"tensor extents must all be >= 1, got {dims}")
    dtype = _CODE_DTYPES[dtype_code]
    count = int(np.prod(dims))
    payload = _read_exact(src, count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype, copy=False)
    if arr.size != count:
        raise DataError(f"payload length {arr.size} does not match dims product {count}")
    return arr.reshape(dims).copy()


def write_tensor_file(t: np.ndarray, path) -> int:
    with open(path, "wb") as f:
        return write_tensor(t, f)


def read_tensor_file(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"tensor file not found: {path}")
    with open(path, "rb") as f:
        return read_tensor(f)


def write_tensor_sequence(tensors: list[np.ndarray], path) -> int:
    """Write concatenated PFTN containers (e.g. one feature stack per file)."""
    total = 0
    with open(path, "wb") as f:
        for t in tensors:
            total += write_tensor(t, f)
    return total


def read_tensor_sequence(path) -> list[np.ndarray]:
    """Read every container in a file of concatenated PFTN containers."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"tensor file not found: {path}")
    tensors = []
    with open(path, "rb") as f:
        data = f.read()
    src = io.BytesIO(data)
    while src.tell() < len(data):
        tensors.append(read_tensor(src))
    if not tensors:
        raise DataError(f"no tensor containers in {path}")
    return tensors


# -- manifests ---------------------------------------------------------------

_LABELS = ("normal", "anomalous")
_SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    feature_path: str
    label: str
    image_id: str
    mask_path: str | None = None


@dataclass
class Manifest:
    split: str
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, stored: str) -> Path:
        p = Path(stored)
        return p if p.is_absolute() else self.root / p


def _validate_manifest(manifest: Manifest, origin: str) -> Manifest:
    if manifest.split not in _SPLITS:
        raise DataError(f"{origin}: split must be one of {_SPLITS}, got {manifest.split!r}")
    seen_paths: set[str] = set()
    for i, e in enumerate(manifest.entries):
        where = f"{origin}: entry {i} ({e.image_id!r})"
        if e.label not in _LABELS:
            raise DataError(f"{where}: label must be one of {_LABELS}, got {e.label!r}")
        if manifest.split == "train" and e.label != "normal":
            raise DataError(f"{where}: train split admits only normal samples")
        if not e.feature_path:
            raise DataError(f"{where}: empty feature_path")
        if e.feature_path in seen_paths:
            raise DataError(f"{where}: duplicate feature_path {e.feature_path!r}")
        seen_paths.add(e.feature_path)
        if not isinstance(e.image_id, str) or not e.image_id:
            raise DataError(f"{where}: image_id must be a non-empty string")
    return manifest


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "split" not in raw or "entries" not in raw:
        raise DataError(f"{path}: manifest must be an object with 'split' and 'entries'")
    entries = []
    if not isinstance(raw["entries"], list):
        raise DataError(f"{path}: 'entries' must be a list")
    for i, item in enumerate(raw["entries"]):
        if not isinstance(item, dict):
            raise DataError(f"{path}: entry {i} is not an object")
        missing = {"feature_path", "label", "image_id"} - item.keys()
        if missing:
            raise DataError(f"{path}: entry {i} missing fields {sorted(missing)}")
        entries.append(
            ManifestEntry(
                feature_path=item["feature_path"],
                label=item["label"],
                image_id=item["image_id"],
                mask_path=item.get("mask_path"),
            )
        )
    manifest = Manifest(split=raw["split"], entries=entries, root=path.parent)
    return _validate_manifest(manifest, str(path))


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    _validate_manifest(manifest, str(path))
    doc = {
        "split": manifest.split,
        "entries": [
            {
                "feature_path": e.feature_path,
                "label": e.label,
                "mask_path": e.mask_path,
                "image_id": e.image_id,
            }
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    rng_seed: int
    format_version: int = FORMAT_VERSION


def save_checkpoint(ck: Checkpoint, path) -> None:
    """Serialize config plus the named tensor table; byte-stable for equal inputs."""
    directory = []
    payloads = []
    offset = 0
    for name in sorted(ck.tensors):
        t = _validate_tensor(ck.tensors[name])
        payload = np.ascontiguousarray(t).astype(t.dtype.newbyteorder("<"), copy=False).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[t.dtype],
                "dims": list(t.shape),
                "offset": offset,
            }
        )
        payloads.append(payload)
        offset += len(payload)
    header = {
        "format_version": ck.format_version,
        "rng_seed": ck.rng_seed,
        "config": ck.config,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PFCK_MAGIC)
        f.write(struct.pack("<I", ck.format_version))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for payload in payloads:
            f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != PFCK_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}, expected {PFCK_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "checkpoint version"))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        try:
            header = json.loads(_read_exact(f, header_len, "header").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DataError(f"{path}: corrupt checkpoint header: {exc}") from exc
        payload = f.read()
    tensors: dict[str, np.ndarray] = {}
    for item in header.get("tensors", []):
        dtype = _NAME_DTYPES.get(item.get("dtype"))
        if dtype is None:
            raise DataError(f"{path}: unknown tensor dtype {item.get('dtype')!r}")
        dims = tuple(item["dims"])
        count = int(np.prod(dims))
        start = item["offset"]
        end = start + count * dtype.itemsize
        if end > len(payload):
            raise DataError(f"{path}: tensor {item['name']!r} payload is truncated")
        arr = np.frombuffer(payload[start:end], dtype=dtype.newbyteorder("<"))
        tensors[item["name"]] = arr.astype(dtype, copy=False).reshape(dims).copy()
    return Checkpoint(
        config=header.get("config", {}),
        tensors=tensors,
        rng_seed=header.get("rng_seed", 0),
        format_version=header.get("format_version", FORMAT_VERSION),
    )
