"""Built-in deterministic backend: seeded random linear projections.

For a flattened input ``x`` of length ``n`` the ``proj`` layer is
``A @ x / sqrt(n)`` with ``A[i, j]`` uniform in (-1, 1), drawn as the first
output of a SplitMix64 stream seeded with ``mix(seed, i * n + j)``; ``relu``
clamps ``proj`` at zero. Token sequences enter as ``ids / vocab_size``.
"""

from __future__ import annotations

import math
import re
from typing import Any, Sequence

import numpy as np

from mmfex.extract.base import Extractor, ExtractorError
from mmfex.hashing import tag_seed, uniform_matrix
from mmfex.preprocess import TokenSequence

LAYERS = ("proj", "relu")
DEFAULT_DIM = 64
DEFAULT_RESHAPE = (32, 32)

_PRESET = re.compile(r"^ref-(linear|clip)(?:-(\d+))?$")
_SUPPORT = {
    "linear": frozenset({"visual", "textual"}),
    "clip": frozenset({"visual", "textual", "visual_textual"}),
}


def parse_preset(name: str) -> tuple[str, int]:
    m = _PRESET.match(name)
    if not m:
        raise ExtractorError(
            f"unknown reference preset {name!r}; expected ref-linear[-<dim>] or ref-clip[-<dim>]"
        )
    dim = int(m.group(2)) if m.group(2) else DEFAULT_DIM
    if dim <= 0:
        raise ExtractorError(f"preset {name!r}: dimension must be positive")
    return m.group(1), dim


def check_reference_model(name: str, modality: str, output_layers: Sequence[str | int]) -> list[str]:
    try:
        kind, _ = parse_preset(name)
    except ExtractorError as exc:
        return [str(exc)]
    problems = []
    if modality not in _SUPPORT[kind]:
        problems.append(f"preset {name!r} does not support modality {modality}")
    for layer in output_layers:
        if isinstance(layer, int):
            if not 0 <= layer < len(LAYERS):
                problems.append(f"layer index {layer} out of range for {list(LAYERS)}")
        elif layer not in LAYERS:
            problems.append(f"layer {layer!r} not declared; available: {list(LAYERS)}")
    return problems


class Projection:
    """Lazily materialised projection for one input length."""

    def __init__(self, seed: int, dim: int):
        self.seed = seed
        self.dim = dim
        self._matrices: dict[int, np.ndarray] = {}

    def matrix(self, n: int) -> np.ndarray:
        mat = self._matrices.get(n)
        if mat is None:
            mat = uniform_matrix(self.seed, self.dim, n)
            self._matrices[n] = mat
        return mat

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Project a (batch, n) array."""
        n = x.shape[1]
        return (x @ self.matrix(n).T) / math.sqrt(n)


def as_input(payload: Any) -> np.ndarray:
    if isinstance(payload, TokenSequence):
        return np.asarray(payload.ids, dtype=np.float64) / payload.vocab_size
    return np.asarray(payload, dtype=np.float64).reshape(-1)


def _stack(payloads: Sequence[Any]) -> np.ndarray:
    rows = [as_input(p) for p in payloads]
    if len({r.size for r in rows}) != 1:
        raise ExtractorError("inputs within a batch have different sizes; set reshape")
    return np.stack(rows)


class ReferenceExtractor(Extractor):
    backend_kind = "reference"
    declared_layers = LAYERS

    def __init__(self, name: str, modality: str, seed: int):
        kind, dim = parse_preset(name)
        if modality not in _SUPPORT[kind]:
            raise ExtractorError(f"preset {name!r} does not support modality {modality}")
        self.name = name
        self.modality = modality
        self.dim = dim
        self.seed = seed
        if modality == "visual_textual":
            self._visual = Projection(tag_seed(seed, "visual"), dim)
            self._textual = Projection(tag_seed(seed, "textual"), dim)
        else:
            self._single = Projection(seed, dim)
        if modality != "textual":
            self.default_reshape = DEFAULT_RESHAPE

    def output_dim(self, layer):
        self.resolve_layer(layer)
        return (self.dim, self.dim) if self.paired else self.dim

    def _layers(self, proj: np.ndarray, layers: Sequence[str]) -> dict[str, np.ndarray]:
        out = {}
        for layer in layers:
            out[layer] = proj if layer == "proj" else np.maximum(proj, 0.0)
        return out

    def forward(self, payloads, layers):
        layers = [self.resolve_layer(layer) for layer in layers]
        if not self.paired:
            return self._layers(self._single(_stack(payloads)), layers)
        vis = self._layers(self._visual(_stack([p[0] for p in payloads])), layers)
        txt = self._layers(self._textual(_stack([p[1] for p in payloads])), layers)
        return {layer: (vis[layer], txt[layer]) for layer in layers}
