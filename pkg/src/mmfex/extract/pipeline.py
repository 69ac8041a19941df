"""End-to-end extraction: sources -> batches -> extractor -> (fusion) -> store."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from mmfex.config import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    ConfigSpec,
    ModalityConfig,
    ModelSpec,
    PathPair,
    resolve_path,
)
from mmfex.extract.base import EmbeddingBatch, Extractor, ExtractorError
from mmfex.extract.graph import GraphExtractor
from mmfex.extract.reference import ReferenceExtractor
from mmfex.fusion import fuse, fused_output_name
from mmfex.ingest import (
    Batch,
    IngestError,
    ItemTable,
    LoaderSpec,
    align_items,
    batched_stream,
    load_text_source,
    scan_image_source,
)
from mmfex.preprocess import ImagePipeline, PreprocessError, TextPipeline, get_tokenizer
from mmfex.store import EmbeddingRecord, Manifest, StoreError, write_embedding, write_manifest

log = logging.getLogger(__name__)

# image_processor names that select a normalisation preset
IMAGE_PROCESSOR_PRESETS = {
    "imagenet": {"kind": "zscore", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    "zscore": {"kind": "zscore", "mean": IMAGENET_MEAN, "std": IMAGENET_STD},
    "minmax": {"kind": "minmax"},
    "none": {},
}


class ExtractionError(Exception):
    def __init__(self, message: str, modality: str, model_name: str | None = None,
                 item_id: str | None = None):
        self.modality = modality
        self.model_name = model_name
        self.item_id = item_id
        where = [f"modality={modality}"]
        if model_name is not None:
            where.append(f"model={model_name}")
        if item_id is not None:
            where.append(f"item={item_id}")
        super().__init__(f"[{' '.join(where)}] {message}")


@dataclass(frozen=True)
class ExtractionRun:
    config: ConfigSpec
    seed: int = 42
    out_root: str | Path | None = None

    @property
    def output_root(self) -> Path:
        return Path(self.out_root if self.out_root is not None else self.config.dataset_path)


def _find_file(base_dir: str | Path | None, name: str) -> Path:
    p = Path(name)
    if p.exists() or p.is_absolute() or base_dir is None:
        return p
    return Path(base_dir) / p


def build_extractor(spec: ModelSpec, seed: int, modality: str, base_dir: str | Path | None = None) -> Extractor:
    if spec.backend == "reference":
        ex: Extractor = ReferenceExtractor(spec.model_name, modality, seed)
    elif spec.backend == "graph":
        ex = GraphExtractor(_find_file(base_dir, spec.model_name), modality)
    else:
        raise ExtractorError(f"unknown backend {spec.backend!r}")
    for layer in spec.output_layers:
        ex.resolve_layer(layer)
    return ex


def extract_batch(ex: Extractor, batch: Batch, output_layers: Sequence[str | int]) -> list[EmbeddingBatch]:
    names = [ex.resolve_layer(layer) for layer in output_layers]
    ids = tuple(batch.item_ids)
    outputs = ex.forward([payload for _, payload in batch.items], names)
    result = []
    for name in names:
        value = outputs[name]
        if ex.paired:
            result.append(EmbeddingBatch(name, ids, value[0], value[1]))
        else:
            result.append(EmbeddingBatch(name, ids, value))
    return result


def image_pipeline(spec: ModelSpec, ex: Extractor) -> ImagePipeline:
    """Explicit preprocessing wins, then a known image_processor preset, then the backend default."""
    reshape = spec.reshape or ex.default_reshape
    if spec.preprocessing is not None:
        pre = {"kind": spec.preprocessing.kind, "mean": spec.preprocessing.mean, "std": spec.preprocessing.std}
    elif spec.image_processor in IMAGE_PROCESSOR_PRESETS:
        pre = IMAGE_PROCESSOR_PRESETS[spec.image_processor]
    else:
        if spec.image_processor is not None:
            log.info("image_processor %r is not a preset; using backend default", spec.image_processor)
        pre = ex.default_preprocessing or {}
    kind = pre.get("kind")
    mean = tuple(pre["mean"]) if pre.get("mean") is not None else None
    std = tuple(pre["std"]) if pre.get("std") is not None else None
    if kind == "zscore":
        mean = mean or IMAGENET_MEAN
        std = std or IMAGENET_STD
    return ImagePipeline(tuple(reshape) if reshape else None, kind, mean, std)


def text_pipeline(spec: ModelSpec, ex: Extractor, base_dir: str | Path | None) -> TextPipeline:
    name = spec.tokenizer_name or getattr(ex, "tokenizer", None)
    return TextPipeline(get_tokenizer(name, base_dir), spec.clear_text)


@dataclass(frozen=True)
class PairedTransform:
    image: ImagePipeline
    text: TextPipeline

    def __call__(self, payload):
        return self.image(payload[0]), self.text(payload[1])


def model_slug(model_name: str) -> str:
    name = model_name
    while name.startswith("./"):
        name = name[2:]
    slug = re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_.")
    return slug or "model"


def _leaf(path: str) -> str:
    return Path(path).name or path


# --------------------------------------------------------------------------


def load_tables(config: ConfigSpec, block: ModalityConfig) -> ItemTable:
    """Resolve a modality block's sources into one table of locators.

    Paired blocks produce ``(image path, text)`` locators over aligned items.
    """
    base = config.dataset_path
    if block.modality == "visual":
        return scan_image_source(resolve_path(base, block.input_path))
    if block.modality == "textual":
        return load_text_source(resolve_path(base, block.input_path), block.item_column,
                                block.text_column)
    pair = block.input_path
    if not isinstance(pair, PathPair) or not pair.complete:
        raise IngestError("visual_textual requires visual and textual input paths")
    images = scan_image_source(resolve_path(base, pair.visual))
    texts = load_text_source(resolve_path(base, pair.textual), block.item_column, block.text_column)
    images, texts = align_items(images, texts)
    entries = tuple((i, (loc, txt)) for (i, loc), (_, txt) in zip(images.entries, texts.entries))
    return ItemTable("visual_textual", entries, images.dropped + texts.dropped)


class _Sink:
    """Writes records for one (stream, layer) as they arrive and builds the manifest."""

    def __init__(self, directory: Path, meta: dict[str, str]):
        self.directory = directory
        self.meta = meta
        self.rows: list[tuple[str, str, int]] = []
        self.dim: int | None = None

    def add(self, item_id: str, vector: np.ndarray) -> None:
        rec = EmbeddingRecord(item_id, vector)
        if self.dim is None:
            self.dim = rec.dim
        elif rec.dim != self.dim:
            raise StoreError(f"{item_id}: dim {rec.dim} differs from stream dim {self.dim}")
        path = write_embedding(rec, self.directory)
        self.rows.append((item_id, path.name, rec.dim))

    def close(self) -> Manifest:
        manifest = Manifest(self.rows, self.meta)
        write_manifest(manifest, self.directory)
        return manifest


def _sinks_for(run: ExtractionRun, block: ModalityConfig, spec: ModelSpec, layer: str) -> dict[str, _Sink]:
    root = run.output_root
    slug = model_slug(spec.model_name)
    meta = {
        "modality": block.modality,
        "model_name": spec.model_name,
        "layer": layer,
        "fusion": "none",
        "seed": str(run.seed),
    }
    if block.modality != "visual_textual":
        return {"single": _Sink(root / block.output_path / slug / layer, {**meta, "stream": block.modality})}
    out = block.output_path
    sinks = {
        "visual": _Sink(root / out.visual / slug / layer, {**meta, "stream": "visual"}),
        "textual": _Sink(root / out.textual / slug / layer, {**meta, "stream": "textual"}),
    }
    if spec.fusion is not None:
        fused = fused_output_name(_leaf(out.visual), _leaf(out.textual), spec.fusion)
        sinks["fused"] = _Sink(root / fused / slug / layer, {**meta, "fusion": spec.fusion, "stream": "fused"})
    return sinks


def _run_model(run: ExtractionRun, block: ModalityConfig, spec: ModelSpec, table: ItemTable,
               loader: LoaderSpec) -> list[Manifest]:
    base = run.config.dataset_path
    ex = build_extractor(spec, run.seed, block.modality, base)
    layers = list(dict.fromkeys(ex.resolve_layer(layer) for layer in spec.output_layers))
    if block.modality == "visual":
        transform: Any = image_pipeline(spec, ex)
    elif block.modality == "textual":
        transform = text_pipeline(spec, ex, base)
    else:
        transform = PairedTransform(image_pipeline(spec, ex), text_pipeline(spec, ex, base))

    sinks = {layer: _sinks_for(run, block, spec, layer) for layer in layers}
    stream = batched_stream(table, loader, transform)
    for batch in stream:
        for emb in extract_batch(ex, batch, layers):
            layer_sinks = sinks[emb.layer]
            for row, item_id in enumerate(emb.item_ids):
                if emb.paired:
                    layer_sinks["visual"].add(item_id, emb.vectors[row])
                    layer_sinks["textual"].add(item_id, emb.textual[row])
                    if "fused" in layer_sinks:
                        layer_sinks["fused"].add(item_id, fuse(emb.vectors[row], emb.textual[row], spec.fusion))
                else:
                    layer_sinks["single"].add(item_id, emb.vectors[row])
    return [sink.close() for layer in layers for sink in sinks[layer].values()]


def run_extraction(run: ExtractionRun, loader: LoaderSpec | None = None) -> list[Manifest]:
    """Extract every model of every modality block; returns one manifest per stored stream."""
    loader = loader or run.config.loader
    manifests: list[Manifest] = []
    for block in run.config.modalities:
        try:
            table = load_tables(run.config, block)
        except (IngestError, OSError) as exc:
            raise ExtractionError(str(exc), block.modality) from exc
        log.info("%s: %d items", block.modality, len(table))
        for spec in block.models:
            try:
                manifests += _run_model(run, block, spec, table, loader)
            except (IngestError, ExtractorError, PreprocessError, StoreError, ValueError, OSError) as exc:
                raise ExtractionError(str(exc), block.modality, spec.model_name,
                                      getattr(exc, "item_id", None)) from exc
    return manifests

