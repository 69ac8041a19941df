from mmfex.extract.base import EmbeddingBatch, Extractor, ExtractorError
from mmfex.extract.graph import GraphExtractor, load_graph, save_graph
from mmfex.extract.pipeline import (
    ExtractionError,
    ExtractionRun,
    build_extractor,
    extract_batch,
    run_extraction,
)
from mmfex.extract.reference import ReferenceExtractor

__all__ = [
    "EmbeddingBatch",
    "ExtractionError",
    "ExtractionRun",
    "Extractor",
    "ExtractorError",
    "GraphExtractor",
    "ReferenceExtractor",
    "build_extractor",
    "extract_batch",
    "load_graph",
    "run_extraction",
    "save_graph",
]
