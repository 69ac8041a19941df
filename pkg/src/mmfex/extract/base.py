from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


class ExtractorError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Vectors for one output layer of one batch.

    ``vectors`` is (items, dim); paired extractors also fill ``textual`` and
    then ``vectors`` holds the visual side.
    """

    layer: str
    item_ids: tuple[str, ...]
    vectors: np.ndarray
    textual: np.ndarray | None = None

    @property
    def paired(self) -> bool:
        return self.textual is not None

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


class Extractor:
    backend_kind: str = ""
    modality: str = ""
    declared_layers: tuple[str, ...] = ()

    # preprocessing applied when the model spec does not say otherwise
    default_reshape: tuple[int, int] | None = None
    default_preprocessing: dict | None = None

    @property
    def paired(self) -> bool:
        return self.modality == "visual_textual"

    def output_dim(self, layer: str) -> int | tuple[int, int]:
        raise NotImplementedError

    def resolve_layer(self, layer: str | int) -> str:
        if isinstance(layer, int):
            if not 0 <= layer < len(self.declared_layers):
                raise ExtractorError(
                    f"layer index {layer} out of range for layers {list(self.declared_layers)}"
                )
            return self.declared_layers[layer]
        if layer not in self.declared_layers:
            raise ExtractorError(f"layer {layer!r} not declared; available: {list(self.declared_layers)}")
        return layer

    def forward(self, payloads: Sequence[Any], layers: Sequence[str]) -> dict[str, Any]:
        """Map preprocessed payloads to ``{layer: (items, dim) array}``.

        Paired extractors return ``{layer: (visual, textual)}``.
        """
        raise NotImplementedError
