"""Fusion of a visual and a textual embedding into one vector."""

from __future__ import annotations

import numpy as np

FUSION_OPS = ("concat", "sum", "mul", "mean")


class DimensionMismatchError(ValueError):
    pass


def fused_dim(dim_a: int, dim_b: int, op: str) -> int:
    if op not in FUSION_OPS:
        raise ValueError(f"unknown fusion {op!r}; legal values: {', '.join(FUSION_OPS)}")
    if op == "concat":
        return dim_a + dim_b
    if dim_a != dim_b:
        raise DimensionMismatchError(
            f"fusion '{op}' needs equal dimensionalities, got {dim_a} and {dim_b}"
        )
    return dim_a


def fuse(a, b, op: str) -> np.ndarray:
    """Fuse two 1-d vectors (or row-aligned 2-d batches) with ``op``."""
    a = np.asarray(a)
    b = np.asarray(b)
    fused_dim(a.shape[-1], b.shape[-1], op)
    if op == "concat":
        return np.concatenate([a, b], axis=-1)
    if op == "sum":
        return a + b
    if op == "mul":
        return a * b
    return (a + b) / 2


def fused_output_name(name_a: str, name_b: str, op: str) -> str:
    if not name_a or not name_b:
        raise ValueError("fused output names must be non-empty")
    if op not in FUSION_OPS:
        raise ValueError(f"unknown fusion {op!r}")
    return f"{name_a}_{name_b}_{op}"


def fuse_stores(dir_a, dir_b, op: str, out_root, name_a: str | None = None,
                name_b: str | None = None):
    """Offline fusion of two stored embedding sets over their common items.

    The result is written to ``out_root/<name_a>_<name_b>_<op>``; names default
    to the store directory names.
    """
    from pathlib import Path

    from mmfex.store import EmbeddingRecord, EmbeddingStore, StoreError, write_store

    a, b = EmbeddingStore.open(dir_a), EmbeddingStore.open(dir_b)
    fused_dim(a.dim, b.dim, op)
    common = sorted(set(a.item_ids) & set(b.item_ids), key=lambda s: s.encode("utf-8"))
    if not common:
        raise StoreError("the two stores have no items in common")
    name = fused_output_name(name_a or Path(dir_a).resolve().name, name_b or Path(dir_b).resolve().name, op)
    meta_a, meta_b = a.manifest.meta, b.manifest.meta
    meta = {
        "modality": "fused",
        "model_name": f"{meta_a.get('model_name', '?')}+{meta_b.get('model_name', '?')}",
        "layer": f"{meta_a.get('layer', '?')}+{meta_b.get('layer', '?')}",
        "fusion": op,
        "seed": meta_a.get("seed", ""),
        "stream": "fused",
    }
    records = (EmbeddingRecord(i, fuse(a.get(i).astype(np.float64), b.get(i).astype(np.float64), op))
               for i in common)
    manifest = write_store(records, Path(out_root) / name, meta)
    manifest.directory = Path(out_root) / name
    return manifest
