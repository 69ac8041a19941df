"""Serialized computation graph backend.

A graph file is an ``.npz`` archive: the ``__graph__`` entry holds a JSON
description, every other entry is a named weight tensor. Example::

    {
      "format": "mmfex-graph", "version": 1,
      "inputs": {"image": {"shape": [3, 16, 16]}},
      "nodes": [
        {"name": "flat", "op": "flatten", "inputs": ["image"]},
        {"name": "fc", "op": "linear", "inputs": ["flat"], "weight": "fc.w", "bias": "fc.b"},
        {"name": "act", "op": "relu", "inputs": ["fc"]}
      ],
      "outputs": {"fc": "fc", "avgpool": "act"}
    }

Inputs are ``image`` (a (3, H, W) array) and/or ``tokens`` (token ids). A
graph with both inputs is multimodal; each of its outputs maps to a
``[visual_node, textual_node]`` pair.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from mmfex.extract.base import Extractor, ExtractorError
from mmfex.preprocess import TokenSequence

GRAPH_FORMAT = "mmfex-graph"
GRAPH_KEY = "__graph__"


def _linear(x, node, w):
    out = w[node["weight"]] @ x
    if node.get("bias"):
        out = out + w[node["bias"]]
    return out


def _embed(ids, node, w):
    table = w[node["weight"]]
    ids = np.asarray(ids, dtype=np.int64)
    ids = ids[ids != node.get("padding_id", 0)]
    if ids.size == 0:
        return np.zeros(table.shape[1])
    return table[ids % table.shape[0]].mean(axis=0)


def _l2norm(x, node, w):
    norm = np.linalg.norm(x)
    return x / norm if norm > 0 else x


_UNARY: dict[str, Callable[[np.ndarray, Mapping, Mapping], np.ndarray]] = {
    "identity": lambda x, n, w: x,
    "flatten": lambda x, n, w: np.reshape(x, -1),
    "linear": _linear,
    "relu": lambda x, n, w: np.maximum(x, 0.0),
    "tanh": lambda x, n, w: np.tanh(x),
    "sigmoid": lambda x, n, w: 1.0 / (1.0 + np.exp(-x)),
    "spatial_mean": lambda x, n, w: np.asarray(x).reshape(x.shape[0], -1).mean(axis=1),
    "embed": _embed,
    "l2norm": _l2norm,
    "scale": lambda x, n, w: x * float(n.get("value", 1.0)),
}
_NARY = {
    "add": lambda xs: np.sum(xs, axis=0),
    "mul": lambda xs: np.prod(xs, axis=0),
    "concat": lambda xs: np.concatenate(xs),
}


def save_graph(path: str | Path, graph: Mapping[str, Any], weights: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    payload = {GRAPH_KEY: np.array(json.dumps(dict(graph)))}
    payload.update({k: np.asarray(v, dtype=np.float64) for k, v in weights.items()})
    with path.open("wb") as fh:
        np.savez(fh, **payload)
    return path


def load_graph(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise ExtractorError(f"graph file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            if GRAPH_KEY not in archive.files:
                raise ExtractorError(f"{path}: not a graph archive (no {GRAPH_KEY} entry)")
            graph = json.loads(str(archive[GRAPH_KEY]))
            weights = {k: archive[k] for k in archive.files if k != GRAPH_KEY}
    except (OSError, ValueError) as exc:
        raise ExtractorError(f"{path}: cannot read graph: {exc}") from exc
    if graph.get("format") != GRAPH_FORMAT:
        raise ExtractorError(f"{path}: unsupported graph format {graph.get('format')!r}")
    return graph, weights


class GraphExtractor(Extractor):
    backend_kind = "graph"

    def __init__(self, path: str | Path, modality: str):
        self.path = Path(path)
        self.graph, self.weights = load_graph(self.path)
        inputs = self.graph.get("inputs", {})
        self.nodes = {n["name"]: n for n in self.graph.get("nodes", [])}
        for node in self.nodes.values():
            op = node.get("op")
            if op not in _UNARY and op not in _NARY:
                raise ExtractorError(f"{self.path}: node {node['name']!r} has unknown op {op!r}")
        outputs = self.graph.get("outputs", {})
        if not outputs:
            raise ExtractorError(f"{self.path}: graph declares no outputs")
        self.outputs = {str(k): v for k, v in outputs.items()}
        self.declared_layers = tuple(self.outputs)

        has_image, has_tokens = "image" in inputs, "tokens" in inputs
        paired_outputs = all(isinstance(v, list) for v in self.outputs.values())
        if has_image and has_tokens and paired_outputs:
            supported = {"visual_textual"}
        elif has_image and not paired_outputs:
            supported = {"visual"}
        elif has_tokens and not paired_outputs:
            supported = {"textual"}
        else:
            raise ExtractorError(f"{self.path}: inconsistent inputs/outputs declaration")
        if modality not in supported:
            raise ExtractorError(f"graph {self.path} does not support modality {modality}")
        self.modality = modality

        shape = inputs.get("image", {}).get("shape")
        if shape and len(shape) == 3:
            self.default_reshape = (int(shape[1]), int(shape[2]))
        self.default_preprocessing = self.graph.get("preprocessing")
        self.tokenizer = self.graph.get("tokenizer")
        self._dims: dict[str, Any] = {}

    def _eval(self, node_name: str, feeds: dict[str, Any], cache: dict[str, Any]):
        if node_name in cache:
            return cache[node_name]
        if node_name in feeds:
            return feeds[node_name]
        node = self.nodes.get(node_name)
        if node is None:
            raise ExtractorError(f"{self.path}: unknown node {node_name!r}")
        args = [self._eval(name, feeds, cache) for name in node.get("inputs", [])]
        op = node["op"]
        try:
            if op in _NARY:
                value = _NARY[op](args)
            else:
                value = _UNARY[op](args[0], node, self.weights)
        except (KeyError, ValueError, IndexError) as exc:
            raise ExtractorError(f"{self.path}: node {node_name!r} failed: {exc}") from exc
        cache[node_name] = np.asarray(value, dtype=np.float64)
        return cache[node_name]

    def _feeds(self, payload: Any) -> dict[str, Any]:
        if self.paired:
            return {"image": np.asarray(payload[0], dtype=np.float64), "tokens": _ids(payload[1])}
        if isinstance(payload, TokenSequence):
            return {"tokens": _ids(payload)}
        return {"image": np.asarray(payload, dtype=np.float64)}

    def output_dim(self, layer):
        layer = self.resolve_layer(layer)
        if layer not in self._dims:
            raise ExtractorError(f"output dim of {layer!r} is known only after the first batch")
        return self._dims[layer]

    def forward(self, payloads, layers):
        layers = [self.resolve_layer(layer) for layer in layers]
        rows: dict[str, list] = {layer: [] for layer in layers}
        for payload in payloads:
            feeds, cache = self._feeds(payload), {}
            for layer in layers:
                target = self.outputs[layer]
                if self.paired:
                    rows[layer].append((self._eval(target[0], feeds, cache).reshape(-1),
                                        self._eval(target[1], feeds, cache).reshape(-1)))
                else:
                    rows[layer].append(self._eval(target, feeds, cache).reshape(-1))
        out = {}
        for layer, values in rows.items():
            if self.paired:
                out[layer] = (np.stack([v for v, _ in values]), np.stack([t for _, t in values]))
                self._dims[layer] = (out[layer][0].shape[1], out[layer][1].shape[1])
            else:
                out[layer] = np.stack(values)
                self._dims[layer] = out[layer].shape[1]
        return out


def _ids(tokens: Any) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        return np.asarray(tokens.ids, dtype=np.int64)
    return np.asarray(tokens, dtype=np.int64)
