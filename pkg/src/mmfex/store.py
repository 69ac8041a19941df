"""Binary embedding files and the manifests indexing them.

``.emb`` layout, little-endian::

    magic  b"MFE1"   4 bytes
    version u8 = 1
    dtype   u8 = 0   (float32)
    ndim    u8 = 1
    dim     u32
    dim x float32

A manifest is a TSV ``item_id<TAB>file<TAB>dim`` preceded by ``#key=value``
metadata lines.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"MFE1"
VERSION = 1
DTYPE_FLOAT32 = 0
HEADER = struct.Struct("<4sBBBI")
MANIFEST_NAME = "manifest.tsv"
MANIFEST_META_KEYS = ("modality", "model_name", "layer", "fusion", "seed", "stream")


class StoreError(Exception):
    pass


class EmbeddingFormatError(StoreError, ValueError):
    pass


class BadMagicError(EmbeddingFormatError):
    pass


class UnsupportedFormatError(EmbeddingFormatError):
    """Unknown version, dtype or rank."""


class TruncatedFileError(EmbeddingFormatError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    item_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "values", values)
        if values.size == 0:
            raise ValueError(f"{self.item_id}: embedding dim must be positive")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.item_id}: embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return self.item_id == other.item_id and self.values.tobytes() == other.values.tobytes()


def _check_item_id(item_id: str) -> None:
    if not item_id or item_id in (".", "..") or "/" in item_id or "\\" in item_id or "\0" in item_id:
        raise StoreError(f"item id {item_id!r} cannot be used as a file name")


def encode_embedding(rec: EmbeddingRecord) -> bytes:
    return HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, 1, rec.dim) + rec.values.astype("<f4").tobytes()


def decode_embedding(data: bytes, item_id: str) -> EmbeddingRecord:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{item_id}: bad magic {data[:4]!r}")
    if len(data) < HEADER.size:
        raise TruncatedFileError(f"{item_id}: truncated header")
    _, version, dtype, ndim, dim = HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedFormatError(f"{item_id}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedFormatError(f"{item_id}: unsupported dtype {dtype}")
    if ndim != 1:
        raise UnsupportedFormatError(f"{item_id}: unsupported rank {ndim}")
    payload = data[HEADER.size:]
    if len(payload) < dim * 4:
        raise TruncatedFileError(f"{item_id}: payload has {len(payload)} bytes, need {dim * 4}")
    if len(payload) > dim * 4:
        raise EmbeddingFormatError(f"{item_id}: {len(payload) - dim * 4} trailing bytes")
    values = np.frombuffer(payload, dtype="<f4", count=dim).astype(np.float32)
    return EmbeddingRecord(item_id, values)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_embedding(rec: EmbeddingRecord, directory: str | Path) -> Path:
    _check_item_id(rec.item_id)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{rec.item_id}.emb"
    _atomic_write(path, encode_embedding(rec))
    return path


def read_embedding(path: str | Path) -> EmbeddingRecord:
    path = Path(path)
    return decode_embedding(path.read_bytes(), path.stem)


# --------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    rows: list[tuple[str, str, int]] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)
    directory: Path | None = None

    @property
    def item_ids(self) -> list[str]:
        return [r[0] for r in self.rows]

    @property
    def dim(self) -> int | None:
        dims = {r[2] for r in self.rows}
        return dims.pop() if len(dims) == 1 else None

    def __len__(self) -> int:
        return len(self.rows)

    def validate(self) -> None:
        ids = self.item_ids
        if len(set(ids)) != len(ids):
            raise StoreError("manifest has duplicate item ids")
        files = [r[1] for r in self.rows]
        if len(set(files)) != len(files):
            raise StoreError("manifest has duplicate file paths")


def write_manifest(manifest: Manifest, directory: str | Path) -> Path:
    manifest.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"#{k}={v}" for k, v in manifest.meta.items()]
    lines.append("item_id\tfile\tdim")
    lines += [f"{item_id}\t{file}\t{dim}" for item_id, file, dim in manifest.rows]
    path = directory / MANIFEST_NAME
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    manifest.directory = directory
    return path


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise StoreError(f"manifest not found: {path}")
    meta: dict[str, str] = {}
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
            continue
        parts = line.split("\t")
        if parts == ["item_id", "file", "dim"]:
            continue
        if len(parts) != 3:
            raise StoreError(f"{path}:{lineno}: expected item_id<TAB>file<TAB>dim")
        rows.append((parts[0], parts[1], int(parts[2])))
    manifest = Manifest(rows, meta, path.parent)
    manifest.validate()
    return manifest


class EmbeddingStore:
    """Read-side view of a manifest directory: item id -> vector."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._rows = {r[0]: r for r in manifest.rows}

    @classmethod
    def open(cls, path: str | Path) -> "EmbeddingStore":
        return cls(read_manifest(path))

    @property
    def item_ids(self) -> list[str]:
        return self.manifest.item_ids

    @property
    def dim(self) -> int:
        dim = self.manifest.dim
        if dim is None:
            raise StoreError("store has mixed or no dimensionalities")
        return dim

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._rows

    def get(self, item_id: str) -> np.ndarray:
        row = self._rows.get(item_id)
        if row is None:
            raise KeyError(item_id)
        rec = read_embedding(self.manifest.directory / row[1])
        if rec.dim != row[2]:
            raise StoreError(f"{item_id}: manifest says dim {row[2]}, file has {rec.dim}")
        return rec.values

    def matrix(self, item_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(i).astype(np.float64) for i in item_ids])


def write_store(
    records: Iterable[EmbeddingRecord], directory: str | Path, meta: dict[str, str]
) -> Manifest:
    """Write every record plus the manifest into ``directory``."""
    directory = Path(directory)
    rows = []
    for rec in records:
        path = write_embedding(rec, directory)
        rows.append((rec.item_id, path.name, rec.dim))
    manifest = Manifest(rows, dict(meta))
    write_manifest(manifest, directory)
    return manifest

