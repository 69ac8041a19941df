"""Pipeline configuration: YAML document -> validated :class:`ConfigSpec`.

The document keeps the modular layout of the original extraction framework::

    dataset_path: ./data
    gpu list: 0
    visual:
      items:
        input_path: images
        output_path: visual_embeddings
        model:
          - {model_name: ref-linear-2048, backend: reference, output_layers: proj}

Parsing fills defaults and rejects structurally broken input. Cross-field
rules live in :func:`validate`, which never raises and reports everything it
finds as :class:`Diagnostics`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from mmfex.ingest import LoaderSpec

log = logging.getLogger(__name__)

MODALITIES = ("visual", "textual", "visual_textual")
PREPROCESSING_KINDS = ("zscore", "minmax")
FUSIONS = ("concat", "sum", "mul", "mean")

# Backend names accepted in documents and the runtime backend each maps to.
BACKEND_ALIASES = {
    "reference": "reference",
    "graph": "graph",
    "torch": "graph",
    "transformers": "graph",
}

# Which modalities each declared backend name may serve.
DEFAULT_BACKEND_MATRIX: dict[str, frozenset[str]] = {
    "reference": frozenset(MODALITIES),
    "graph": frozenset(MODALITIES),
    "torch": frozenset({"visual"}),
    "transformers": frozenset(MODALITIES),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_ITEM_COLUMN = "asin"
DEFAULT_TEXT_COLUMN = "description"

_TOP_LEVEL_KEYS = {"dataset_path", "gpu list", "gpu_list", "loader", "benchmark"}
_ITEMS_KEYS = {"input_path", "output_path", "item_column", "text_column", "model"}
_MODEL_KEYS = {
    "model_name", "backend", "output_layers", "reshape", "preprocessing", "mean", "std",
    "tokenizer_name", "image_processor", "clear_text", "fusion",
}
_LOADER_KEYS = {"batch_size", "workers", "prefetch_depth", "on_error"}


@dataclass(frozen=True)
class PathPair:
    visual: str | None
    textual: str | None

    @property
    def complete(self) -> bool:
        return bool(self.visual) and bool(self.textual)


@dataclass(frozen=True)
class PreprocessSpec:
    kind: str
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ModelSpec:
    model_name: str
    backend: str
    output_layers: tuple[str | int, ...]
    reshape: tuple[int, int] | None = None
    preprocessing: PreprocessSpec | None = None
    tokenizer_name: str | None = None
    image_processor: str | None = None
    clear_text: bool = False
    fusion: str | None = None
    # Backend name as written in the document (torch, transformers, ...).
    backend_alias: str | None = None

    @property
    def declared_backend(self) -> str:
        return self.backend_alias or self.backend


@dataclass(frozen=True)
class ModalityConfig:
    modality: str
    input_path: str | PathPair | None
    output_path: str | PathPair | None
    models: tuple[ModelSpec, ...]
    item_column: str | None = None
    text_column: str | None = None


@dataclass(frozen=True)
class BenchmarkSettings:
    interactions: str | None = None
    features: str | None = None
    k: int = 20
    factors: int = 16
    feature_factors: int = 16
    learning_rate: float = 0.05
    reg: float = 0.01
    epochs: int = 100


@dataclass
class Diagnostics:
    errors: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, path: str, message: str) -> None:
        self.errors.append((path, message))

    def warn(self, path: str, message: str) -> None:
        self.warnings.append((path, message))

    def extend(self, other: "Diagnostics") -> None:
        self.errors.extend(other.errors)
        self.warnings.extend(other.warnings)

    def lines(self) -> list[str]:
        out = [f"ERROR {p}: {m}" for p, m in self.errors]
        out += [f"WARNING {p}: {m}" for p, m in self.warnings]
        return out


@dataclass(frozen=True)
class ConfigSpec:
    dataset_path: str
    modalities: tuple[ModalityConfig, ...]
    device_list: tuple[int, ...] = ()
    loader: LoaderSpec = field(default_factory=LoaderSpec)
    benchmark: BenchmarkSettings | None = None
    parse_warnings: tuple[tuple[str, str], ...] = field(default=(), compare=False)

    def modality(self, name: str) -> ModalityConfig | None:
        for block in self.modalities:
            if block.modality == name:
                return block
        return None


class ConfigError(ValueError):
    def __init__(self, diagnostics: Diagnostics):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{p}: {m}" for p, m in diagnostics.errors))


# --------------------------------------------------------------------------
# parsing


def load_config(path: str | Path) -> ConfigSpec:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def parse_config(text: str) -> ConfigSpec:
    """Parse a YAML document into a :class:`ConfigSpec`.

    Raises :class:`ConfigError` carrying every structural error found.
    Unrecognised keys only produce warnings (kept in ``parse_warnings``).
    """
    diag = Diagnostics()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        diag.error("<document>", f"malformed document: {exc}")
        raise ConfigError(diag) from exc
    if not isinstance(doc, Mapping):
        diag.error("<document>", "malformed document: top level must be a mapping")
        raise ConfigError(diag)

    dataset_path = doc.get("dataset_path")
    if not isinstance(dataset_path, str) or not dataset_path.strip():
        diag.error("dataset_path", "missing dataset_path")
        dataset_path = ""

    devices: tuple[int, ...] = ()
    for key in ("gpu list", "gpu_list"):
        if key in doc:
            devices = _parse_devices(doc[key], key, diag)
            diag.warn(key, "accepted but ignored: extraction runs on CPU")

    modalities = []
    for key, value in doc.items():
        key = str(key)
        if key in _TOP_LEVEL_KEYS:
            continue
        if key in MODALITIES:
            block = _parse_modality(key, value, diag)
            if block is not None:
                modalities.append(block)
        elif isinstance(value, Mapping) and "items" in value:
            diag.error(key, f"unknown modality '{key}'; expected one of {', '.join(MODALITIES)}")
        else:
            diag.warn(key, "unrecognized key ignored")
    if not modalities and not diag.errors:
        diag.error("<document>", "at least one modality block is required")

    loader = _parse_loader(doc.get("loader"), diag)
    benchmark = _parse_benchmark(doc.get("benchmark"), diag)

    if diag.errors:
        raise ConfigError(diag)
    for path, message in diag.warnings:
        log.debug("config %s: %s", path, message)
    return ConfigSpec(
        dataset_path=dataset_path,
        modalities=tuple(modalities),
        device_list=devices,
        loader=loader,
        benchmark=benchmark,
        parse_warnings=tuple(diag.warnings),
    )


def _parse_devices(value: Any, path: str, diag: Diagnostics) -> tuple[int, ...]:
    if isinstance(value, str):
        parts = [p for p in value.replace(",", " ").split() if p]
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = [value]
    out = []
    for p in parts:
        try:
            n = int(p)
        except (TypeError, ValueError):
            diag.error(path, f"device ids must be non-negative integers, got {p!r}")
            continue
        if n < 0 or isinstance(p, bool):
            diag.error(path, f"device ids must be non-negative integers, got {p!r}")
            continue
        out.append(n)
    return tuple(out)


def _parse_path(value: Any, path: str, diag: Diagnostics) -> str | PathPair | None:
    if value is None:
        return None
    if isinstance(value, str):
        return value
    if isinstance(value, Mapping):
        for key in value:
            if key not in ("visual", "textual"):
                diag.warn(f"{path}.{key}", "unrecognized key ignored")
        vis, txt = value.get("visual"), value.get("textual")
        return PathPair(str(vis) if vis is not None else None, str(txt) if txt is not None else None)
    diag.error(path, f"expected a path or a {{visual, textual}} mapping, got {type(value).__name__}")
    return None


def _parse_modality(name: str, value: Any, diag: Diagnostics) -> ModalityConfig | None:
    if not isinstance(value, Mapping) or not isinstance(value.get("items"), Mapping):
        diag.error(name, "modality block must contain an 'items' mapping")
        return None
    for key in value:
        if key != "items":
            diag.warn(f"{name}.{key}", "unrecognized key ignored")
    items = value["items"]
    base = f"{name}.items"
    for key in items:
        if key not in _ITEMS_KEYS:
            diag.warn(f"{base}.{key}", "unrecognized key ignored")

    textual_source = name in ("textual", "visual_textual")
    item_column = items.get("item_column", DEFAULT_ITEM_COLUMN if textual_source else None)
    text_column = items.get("text_column", DEFAULT_TEXT_COLUMN if textual_source else None)

    raw_models = items.get("model")
    if isinstance(raw_models, Mapping):
        raw_models = [raw_models]
    models = []
    if not raw_models:
        diag.error(f"{base}.model", "empty model list")
    elif not isinstance(raw_models, list):
        diag.error(f"{base}.model", "model must be a list of mappings")
    else:
        for idx, raw in enumerate(raw_models):
            spec = _parse_model(raw, f"{base}.model[{idx}]", diag)
            if spec is not None:
                models.append(spec)

    return ModalityConfig(
        modality=name,
        input_path=_parse_path(items.get("input_path"), f"{base}.input_path", diag),
        output_path=_parse_path(items.get("output_path"), f"{base}.output_path", diag),
        models=tuple(models),
        item_column=None if item_column is None else str(item_column),
        text_column=None if text_column is None else str(text_column),
    )


def _float_list(value: Any, path: str, diag: Diagnostics) -> tuple[float, ...] | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)):
        value = [value]
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        diag.error(path, f"expected a list of numbers, got {value!r}")
        return None


def _parse_model(raw: Any, path: str, diag: Diagnostics) -> ModelSpec | None:
    if not isinstance(raw, Mapping):
        diag.error(path, "model entry must be a mapping")
        return None
    for key in raw:
        if key not in _MODEL_KEYS:
            diag.warn(f"{path}.{key}", "unrecognized key ignored")
    n_errors = len(diag.errors)

    name = raw.get("model_name")
    if name is None or str(name).strip() == "":
        diag.error(f"{path}.model_name", "missing model_name")

    alias = raw.get("backend")
    backend = None
    if alias is None:
        diag.error(f"{path}.backend", "missing backend")
    elif str(alias) not in BACKEND_ALIASES:
        diag.error(
            f"{path}.backend",
            f"unknown backend '{alias}'; legal values: {', '.join(BACKEND_ALIASES)}",
        )
    else:
        alias = str(alias)
        backend = BACKEND_ALIASES[alias]

    layers_raw = raw.get("output_layers", [])
    if not isinstance(layers_raw, (list, tuple)):
        layers_raw = [layers_raw]
    layers: list[str | int] = []
    for layer in layers_raw:
        if isinstance(layer, bool) or not isinstance(layer, (str, int)):
            diag.error(f"{path}.output_layers", f"layer must be a name or an index, got {layer!r}")
        else:
            layers.append(layer)

    reshape = None
    if raw.get("reshape") is not None:
        r = raw["reshape"]
        if (
            isinstance(r, (list, tuple)) and len(r) == 2
            and all(isinstance(v, int) and not isinstance(v, bool) for v in r)
        ):
            reshape = (r[0], r[1])
        else:
            diag.error(f"{path}.reshape", f"expected [height, width] integers, got {r!r}")

    mean = _float_list(raw.get("mean"), f"{path}.mean", diag)
    std = _float_list(raw.get("std"), f"{path}.std", diag)
    preprocessing = None
    kind = raw.get("preprocessing")
    if kind is not None:
        if kind not in PREPROCESSING_KINDS:
            diag.error(
                f"{path}.preprocessing",
                f"unknown preprocessing '{kind}'; legal values: {', '.join(PREPROCESSING_KINDS)}",
            )
        else:
            if kind == "zscore":
                mean = IMAGENET_MEAN if mean is None else mean
                std = IMAGENET_STD if std is None else std
            preprocessing = PreprocessSpec(kind, mean, std)
    elif mean is not None or std is not None:
        diag.error(f"{path}.mean", "mean/std require preprocessing: zscore")

    clear_text = raw.get("clear_text", False)
    if not isinstance(clear_text, bool):
        diag.error(f"{path}.clear_text", f"expected a boolean, got {clear_text!r}")
        clear_text = False

    fusion = raw.get("fusion")
    if fusion is not None and fusion not in FUSIONS:
        diag.error(f"{path}.fusion", f"unknown fusion '{fusion}'; legal values: {', '.join(FUSIONS)}")

    if len(diag.errors) > n_errors:
        return None
    return ModelSpec(
        model_name=str(name),
        backend=backend,
        output_layers=tuple(layers),
        reshape=reshape,
        preprocessing=preprocessing,
        tokenizer_name=None if raw.get("tokenizer_name") is None else str(raw["tokenizer_name"]),
        image_processor=None if raw.get("image_processor") is None else str(raw["image_processor"]),
        clear_text=clear_text,
        fusion=fusion,
        backend_alias=alias,
    )


def _parse_loader(raw: Any, diag: Diagnostics) -> LoaderSpec:
    if raw is None:
        return LoaderSpec()
    if not isinstance(raw, Mapping):
        diag.error("loader", "loader must be a mapping")
        return LoaderSpec()
    for key in raw:
        if key not in _LOADER_KEYS:
            diag.warn(f"loader.{key}", "unrecognized key ignored")
    kwargs = {k: raw[k] for k in _LOADER_KEYS if k in raw}
    try:
        return LoaderSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        diag.error("loader", str(exc))
        return LoaderSpec()


def _parse_benchmark(raw: Any, diag: Diagnostics) -> BenchmarkSettings | None:
    if raw is None:
        return None
    if not isinstance(raw, Mapping):
        diag.error("benchmark", "benchmark must be a mapping")
        return None
    fields_ = BenchmarkSettings.__dataclass_fields__
    kwargs = {}
    for key, value in raw.items():
        if key not in fields_:
            diag.warn(f"benchmark.{key}", "unrecognized key ignored")
            continue
        default = fields_[key].default
        try:
            if isinstance(default, bool) or default is None:
                kwargs[key] = None if value is None else str(value)
            else:
                kwargs[key] = type(default)(value)
        except (TypeError, ValueError):
            diag.error(f"benchmark.{key}", f"invalid value {value!r}")
    return BenchmarkSettings(**kwargs)


# --------------------------------------------------------------------------
# serialisation


def _path_to_doc(value: str | PathPair | None) -> Any:
    if isinstance(value, PathPair):
        return {k: v for k, v in (("visual", value.visual), ("textual", value.textual)) if v is not None}
    return value


def _model_to_doc(m: ModelSpec) -> dict[str, Any]:
    out: dict[str, Any] = {
        "model_name": m.model_name,
        "backend": m.declared_backend,
        "output_layers": list(m.output_layers),
        "clear_text": m.clear_text,
    }
    if m.reshape is not None:
        out["reshape"] = list(m.reshape)
    if m.preprocessing is not None:
        out["preprocessing"] = m.preprocessing.kind
        if m.preprocessing.mean is not None:
            out["mean"] = list(m.preprocessing.mean)
        if m.preprocessing.std is not None:
            out["std"] = list(m.preprocessing.std)
    for key in ("tokenizer_name", "image_processor", "fusion"):
        if getattr(m, key) is not None:
            out[key] = getattr(m, key)
    return out


def dump_config(spec: ConfigSpec) -> str:
    """Serialise ``spec`` back to a document that re-parses to an equal spec."""
    doc: dict[str, Any] = {"dataset_path": spec.dataset_path}
    if spec.device_list:
        doc["gpu list"] = list(spec.device_list)
    for block in spec.modalities:
        items: dict[str, Any] = {}
        if block.input_path is not None:
            items["input_path"] = _path_to_doc(block.input_path)
        if block.output_path is not None:
            items["output_path"] = _path_to_doc(block.output_path)
        if block.item_column is not None:
            items["item_column"] = block.item_column
        if block.text_column is not None:
            items["text_column"] = block.text_column
        items["model"] = [_model_to_doc(m) for m in block.models]
        doc[block.modality] = {"items": items}
    loader = spec.loader
    doc["loader"] = {
        "batch_size": loader.batch_size,
        "workers": loader.workers,
        "prefetch_depth": loader.prefetch_depth,
        "on_error": loader.on_error,
    }
    if spec.benchmark is not None:
        doc["benchmark"] = {
            k: getattr(spec.benchmark, k) for k in BenchmarkSettings.__dataclass_fields__
        }
    return yaml.safe_dump(doc, sort_keys=False)


# --------------------------------------------------------------------------
# validation


def resolve_path(dataset_path: str, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(dataset_path) / p


def validate(
    spec: ConfigSpec,
    matrix: Mapping[str, frozenset[str]] | None = None,
    check_paths: bool = False,
) -> Diagnostics:
    """Cross-field checks on a parsed spec. Never raises."""
    from mmfex.extract.reference import check_reference_model

    matrix = DEFAULT_BACKEND_MATRIX if matrix is None else matrix
    diag = Diagnostics()

    seen = set()
    for block in spec.modalities:
        if block.modality in seen:
            diag.error(block.modality, "duplicate modality block")
        seen.add(block.modality)
    if not spec.modalities:
        diag.error("<document>", "at least one modality block is required")
    if not spec.dataset_path:
        diag.error("dataset_path", "dataset_path must be non-empty")
    if check_paths and spec.dataset_path and not Path(spec.dataset_path).is_dir():
        diag.error("dataset_path", f"directory not found: {spec.dataset_path}")

    for block in spec.modalities:
        base = f"{block.modality}.items"
        paired = block.modality == "visual_textual"
        for key in ("input_path", "output_path"):
            value = getattr(block, key)
            if paired:
                if not (isinstance(value, PathPair) and value.complete):
                    kind = "input" if key == "input_path" else "output"
                    diag.error(f"{base}.{key}", f"visual_textual requires visual and textual {kind} paths")
            elif value is None:
                diag.error(f"{base}.{key}", f"{key} is required")
            elif isinstance(value, PathPair):
                diag.error(f"{base}.{key}", f"{block.modality} takes a single {key}, not a pair")
        if block.modality != "visual" and not (block.item_column and block.text_column):
            diag.error(base, "item_column and text_column are required for text sources")
        if not block.models:
            diag.error(f"{base}.model", "empty model list")

        if check_paths and spec.dataset_path:
            _check_input_paths(spec.dataset_path, block, base, diag)

        for idx, model in enumerate(block.models):
            _validate_model(spec, block, model, f"{base}.model[{idx}]", matrix, check_paths, diag,
                            check_reference_model)
    return diag


def _check_input_paths(dataset_path: str, block: ModalityConfig, base: str, diag: Diagnostics) -> None:
    value = block.input_path
    wanted: list[tuple[str, str | None]] = []
    if isinstance(value, PathPair):
        wanted = [("visual", value.visual), ("textual", value.textual)]
    elif value is not None:
        wanted = [(block.modality, value)]
    for kind, rel in wanted:
        if rel is None:
            continue
        p = resolve_path(dataset_path, rel)
        ok = p.is_dir() if kind == "visual" else p.is_file()
        if not ok:
            diag.error(f"{base}.input_path", f"{kind} source not found: {p}")


def _validate_model(spec, block, model: ModelSpec, path, matrix, check_paths, diag, check_reference_model):
    if model.fusion is not None and block.modality != "visual_textual":
        diag.error(f"{path}.fusion", "fusion requires visual_textual")
    declared = model.declared_backend
    allowed = matrix.get(declared)
    if allowed is None:
        diag.error(f"{path}.backend", f"backend '{declared}' not present in the backend matrix")
    elif block.modality not in allowed:
        diag.error(f"{path}.backend", f"backend '{declared}' does not support modality {block.modality}")
    if not model.output_layers:
        diag.error(f"{path}.output_layers", "at least one output layer is required")
    if model.reshape is not None and any(v <= 0 for v in model.reshape):
        diag.error(f"{path}.reshape", "reshape values must be strictly positive")

    pre = model.preprocessing
    if pre is not None:
        if pre.kind != "zscore" and (pre.mean is not None or pre.std is not None):
            diag.error(f"{path}.preprocessing", "mean/std are only legal with zscore")
        if pre.mean is not None and pre.std is not None and len(pre.mean) != len(pre.std):
            diag.error(f"{path}.std", "mean and std must have the same length")
        if pre.std is not None and any(s <= 0 for s in pre.std):
            diag.error(f"{path}.std", "std entries must be strictly positive")
        if block.modality == "textual":
            diag.warn(f"{path}.preprocessing", "image preprocessing has no effect on a textual source")

    if model.backend == "reference":
        for message in check_reference_model(model.model_name, block.modality, model.output_layers):
            diag.error(f"{path}.model_name", message)
    elif check_paths:
        p = Path(model.model_name)
        if not p.exists() and not resolve_path(spec.dataset_path, model.model_name).exists():
            diag.error(f"{path}.model_name", f"graph file not found: {model.model_name}")
