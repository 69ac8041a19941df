"""Item sources, cross-modality alignment and the batched loader.

Images are decoded by a pool of worker threads (PIL and numpy release the
GIL for the heavy parts) feeding a bounded, order-restoring buffer, so the
consumer always receives batches in table order whatever the pool size.
"""

from __future__ import annotations

import csv
import logging
import math
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = frozenset({".png", ".jpg", ".jpeg", ".bmp"})
ON_ERROR_POLICIES = ("fail", "skip")


class IngestError(Exception):
    pass


class DecodeError(IngestError):
    def __init__(self, item_id: str, locator: Any, reason: str):
        self.item_id = item_id
        self.locator = locator
        super().__init__(f"cannot decode item {item_id!r} ({locator}): {reason}")


@dataclass(frozen=True)
class ItemTable:
    modality: str
    entries: tuple[tuple[str, Any], ...]
    # rows dropped while building the table (empty text, failed alignment, ...)
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise IngestError(f"{self.modality}: duplicate item ids")
        if any(_key(a) > _key(b) for a, b in zip(ids, ids[1:])):
            raise IngestError(f"{self.modality}: entries must be sorted by item id")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def item_ids(self) -> list[str]:
        return [e[0] for e in self.entries]


def _key(item_id: str) -> bytes:
    return item_id.encode("utf-8")


def sorted_table(modality: str, entries, dropped: int = 0) -> ItemTable:
    return ItemTable(modality, tuple(sorted(entries, key=lambda e: _key(e[0]))), dropped)


@dataclass(frozen=True)
class Batch:
    index: int
    items: tuple[tuple[str, Any], ...]

    @property
    def item_ids(self) -> list[str]:
        return [i for i, _ in self.items]


@dataclass(frozen=True)
class LoaderSpec:
    batch_size: int = 8
    workers: int = 1
    prefetch_depth: int = 2
    on_error: str = "fail"

    def __post_init__(self):
        for name in ("batch_size", "workers", "prefetch_depth"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.on_error not in ON_ERROR_POLICIES:
            raise ValueError(f"on_error must be one of {ON_ERROR_POLICIES}, got {self.on_error!r}")


@dataclass(frozen=True)
class InteractionSet:
    pairs: tuple[tuple[str, str], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_pairs(cls, pairs) -> "InteractionSet":
        """Deduplicate, keeping first occurrence order."""
        seen = set()
        out = []
        for u, i in pairs:
            if (u, i) not in seen:
                seen.add((u, i))
                out.append((u, i))
        return cls(tuple(out))

    def by_user(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for u, i in self.pairs:
            out.setdefault(u, []).append(i)
        return out

    @property
    def users(self) -> list[str]:
        return sorted({u for u, _ in self.pairs}, key=_key)

    @property
    def items(self) -> list[str]:
        return sorted({i for _, i in self.pairs}, key=_key)


@dataclass(frozen=True)
class Stats:
    users: int
    items: int
    interactions: int
    density: float


# --------------------------------------------------------------------------
# sources


def scan_image_source(directory: str | Path, modality: str = "visual") -> ItemTable:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"image directory not found: {directory}")
    entries = {}
    for p in directory.iterdir():
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in entries:
                raise IngestError(f"duplicate item id {p.stem!r} in {directory}")
            entries[p.stem] = p
    if not entries:
        raise IngestError(f"no image files in {directory}")
    return sorted_table(modality, entries.items())


def load_text_source(
    path: str | Path,
    item_column: str = "asin",
    text_column: str = "description",
    modality: str = "textual",
) -> ItemTable:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"text source not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = reader.fieldnames or []
        for column in (item_column, text_column):
            if column not in header:
                raise IngestError(f"{path}: header lacks column {column!r} (found {header})")
        entries = {}
        dropped = 0
        for row in reader:
            item_id = (row.get(item_column) or "").strip()
            text = row.get(text_column) or ""
            if not item_id:
                dropped += 1
                continue
            if item_id in entries:
                raise IngestError(f"{path}: duplicate item id {item_id!r}")
            if not text.strip():
                # ids are reserved even for dropped rows so duplicates still surface
                entries[item_id] = None
                dropped += 1
                continue
            entries[item_id] = text
    if dropped:
        log.info("%s: dropped %d rows with empty text", path, dropped)
    return sorted_table(modality, [(k, v) for k, v in entries.items() if v is not None], dropped)


def align_items(a: ItemTable, b: ItemTable) -> tuple[ItemTable, ItemTable]:
    common = set(a.item_ids) & set(b.item_ids)
    if not common:
        raise IngestError(f"no common items between {a.modality} and {b.modality} sources")
    dropped_a = len(a) - len(common)
    dropped_b = len(b) - len(common)
    if dropped_a or dropped_b:
        log.info("alignment dropped %d %s and %d %s items", dropped_a, a.modality, dropped_b, b.modality)
    return (
        ItemTable(a.modality, tuple(e for e in a.entries if e[0] in common), a.dropped + dropped_a),
        ItemTable(b.modality, tuple(e for e in b.entries if e[0] in common), b.dropped + dropped_b),
    )


def load_interactions(path: str | Path) -> InteractionSet:
    """Headerless ``user_id<TAB>item_id`` file; duplicates are removed with a warning."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"interactions file not found: {path}")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise IngestError(f"{path}:{lineno}: expected user_id<TAB>item_id")
            pairs.append((parts[0], parts[1]))
    out = InteractionSet.from_pairs(pairs)
    if len(out) != len(pairs):
        log.warning("%s: removed %d duplicate interactions", path, len(pairs) - len(out))
    return out


def dataset_stats(interactions: InteractionSet, items: ItemTable | None = None) -> Stats:
    n_users = len({u for u, _ in interactions.pairs})
    item_ids = {i for _, i in interactions.pairs}
    if items is not None:
        item_ids |= set(items.item_ids)
    n_items = len(item_ids)
    n = len(interactions)
    density = n / (n_users * n_items) if n_users and n_items else 0.0
    return Stats(n_users, n_items, n, density)


# --------------------------------------------------------------------------
# decoding and streaming


def decode_image(path: str | Path) -> np.ndarray:
    """Decode to a float64 (3, H, W) array with values byte/255."""
    with Image.open(path) as img:
        img.load()
        rgb = img.convert("RGB")
    arr = np.asarray(rgb, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def decode_payload(locator: Any) -> Any:
    if isinstance(locator, Path):
        return decode_image(locator)
    if isinstance(locator, tuple):
        return tuple(decode_payload(part) for part in locator)
    return locator


class BatchStream:
    """Iterable of :class:`Batch` with parallel decode and in-order delivery.

    At most ``prefetch_depth`` batches are in flight (submitted but not yet
    handed to the consumer); ``max_buffered`` records the high-water mark.
    """

    def __init__(
        self,
        table: ItemTable,
        loader: LoaderSpec | None = None,
        transform: Callable[[Any], Any] | None = None,
    ):
        if len(table) == 0:
            raise IngestError(f"{table.modality}: cannot stream an empty table")
        self.table = table
        self.loader = loader or LoaderSpec()
        self.transform = transform
        self.buffered = 0
        self.max_buffered = 0
        self.skipped: list[str] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return math.ceil(len(self.table) / self.loader.batch_size)

    def _load_one(self, item_id: str, locator: Any):
        try:
            payload = decode_payload(locator)
            if self.transform is not None:
                payload = self.transform(payload)
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            return DecodeError(item_id, locator, str(exc))
        return payload

    def _submit(self, pool: ThreadPoolExecutor, index: int) -> list[Future]:
        bs = self.loader.batch_size
        chunk = self.table.entries[index * bs:(index + 1) * bs]
        with self._lock:
            self.buffered += 1
            self.max_buffered = max(self.max_buffered, self.buffered)
        return [pool.submit(self._load_one, item_id, loc) for item_id, loc in chunk]

    def _collect(self, index: int, futures: Sequence[Future]) -> Batch:
        bs = self.loader.batch_size
        chunk = self.table.entries[index * bs:(index + 1) * bs]
        items = []
        for (item_id, _), fut in zip(chunk, futures):
            result = fut.result()
            if isinstance(result, DecodeError):
                if self.loader.on_error == "fail":
                    raise result
                log.warning("skipping %s", result)
                self.skipped.append(item_id)
                continue
            items.append((item_id, result))
        return Batch(index, tuple(items))

    def __iter__(self) -> Iterator[Batch]:
        n_batches = len(self)
        depth = self.loader.prefetch_depth
        pool = ThreadPoolExecutor(max_workers=self.loader.workers, thread_name_prefix="mmfex-load")
        pending: deque[tuple[int, list[Future]]] = deque()
        next_index = 0
        try:
            while next_index < n_batches and len(pending) < depth:
                pending.append((next_index, self._submit(pool, next_index)))
                next_index += 1
            while pending:
                index, futures = pending.popleft()
                batch = self._collect(index, futures)
                with self._lock:
                    self.buffered -= 1
                if next_index < n_batches:
                    pending.append((next_index, self._submit(pool, next_index)))
                    next_index += 1
                if batch.items:
                    yield batch
        finally:
            for _, futures in pending:
                for fut in futures:
                    fut.cancel()
            pool.shutdown(wait=True, cancel_futures=True)
        if self.skipped:
            log.warning("%s: skipped %d undecodable items", self.table.modality, len(self.skipped))


def batched_stream(
    table: ItemTable,
    loader: LoaderSpec | None = None,
    transform: Callable[[Any], Any] | None = None,
) -> BatchStream:
    return BatchStream(table, loader, transform)
