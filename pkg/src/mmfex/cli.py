"""``mmfex`` command line: validate, extract, fuse, benchmark.

Exit codes: 0 success, 1 I/O or pipeline failure, 2 configuration or usage
error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from mmfex.config import ConfigError, ConfigSpec, load_config, resolve_path, validate

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("mmfex")


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("MMFEX_LOG", "info").lower(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="pipeline YAML file")
        p.add_argument("--seed", type=_u64, default=42)
        p.add_argument("--check-paths", action="store_true", help="also check that sources exist")

    p = sub.add_parser("validate", help="check a configuration file")
    common(p)

    p = sub.add_parser("extract", help="run the extraction pipeline")
    common(p)
    p.add_argument("--workers", type=_positive, help="override loader workers")
    p.add_argument("--out", help="output root (default: dataset_path)")

    p = sub.add_parser("fuse", help="fuse two stored embedding sets")
    p.add_argument("--a", required=True, help="first store directory (or its manifest)")
    p.add_argument("--b", required=True, help="second store directory (or its manifest)")
    p.add_argument("--op", required=True, help="concat, sum, mul or mean")
    p.add_argument("--out", default=".", help="root for the fused store")
    p.add_argument("--name-a")
    p.add_argument("--name-b")

    p = sub.add_parser("benchmark", help="train and evaluate VBPR on stored embeddings")
    common(p)
    p.add_argument("--interactions", help="user<TAB>item file (default: config benchmark.interactions)")
    p.add_argument("--features", help="embedding manifest (default: config benchmark.features)")
    p.add_argument("--k", type=_positive, help="cutoff (default 20)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="report directory (default: <dataset_path>/benchmark)")
    return parser


def _load(args) -> tuple[ConfigSpec | None, int]:
    try:
        spec = load_config(args.config)
    except OSError as exc:
        print(f"ERROR {args.config}: {exc}", file=sys.stderr)
        return None, EXIT_IO
    except ConfigError as exc:
        for line in exc.diagnostics.lines():
            print(line)
        return None, EXIT_CONFIG
    diag = validate(spec, check_paths=args.check_paths)
    for path, message in spec.parse_warnings:
        diag.warn(path, message)
    if not diag.ok:
        for line in diag.lines():
            print(line)
        return None, EXIT_CONFIG
    return spec, EXIT_OK


def cmd_validate(args) -> int:
    spec, code = _load(args)
    if spec is None:
        return code
    for path, message in spec.parse_warnings:
        print(f"WARNING {path}: {message}")
    print("OK")
    return EXIT_OK


def cmd_extract(args) -> int:
    from mmfex.extract import ExtractionError, ExtractionRun, run_extraction

    spec, code = _load(args)
    if spec is None:
        return code
    loader = spec.loader if args.workers is None else replace(spec.loader, workers=args.workers)
    run = ExtractionRun(spec, seed=args.seed, out_root=args.out)
    try:
        manifests = run_extraction(run, loader)
    except ExtractionError as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_IO
    for m in manifests:
        modality = m.meta["modality"]
        if m.meta.get("stream") not in (None, modality):
            modality = f"{modality}/{m.meta['stream']}"
        print(f"modality={modality} model={m.meta['model_name']} layer={m.meta['layer']} "
              f"items={len(m)} dim={m.dim} out={m.directory}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    from mmfex.fusion import FUSION_OPS, DimensionMismatchError, fuse_stores
    from mmfex.store import StoreError

    if args.op not in FUSION_OPS:
        print(f"ERROR op: unknown fusion '{args.op}'; legal values: {', '.join(FUSION_OPS)}")
        return EXIT_CONFIG
    try:
        m = fuse_stores(args.a, args.b, args.op, args.out, args.name_a, args.name_b)
    except DimensionMismatchError as exc:
        print(f"ERROR dimensionality mismatch: {exc}")
        return EXIT_CONFIG
    except (StoreError, OSError, ValueError) as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"modality=fused model={m.meta['model_name']} layer={m.meta['layer']} "
          f"items={len(m)} dim={m.dim} out={m.directory}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    from mmfex.ingest import IngestError, load_interactions
    from mmfex.recbench import (
        DivergenceError,
        MissingEmbeddingError,
        VBPRHyperParams,
        run_benchmark,
        write_report,
    )
    from mmfex.store import EmbeddingStore, StoreError

    spec, code = _load(args)
    if spec is None:
        return code
    settings = spec.benchmark
    interactions = args.interactions or (settings.interactions if settings else None)
    features = args.features or (settings.features if settings else None)
    if not interactions or not features:
        print("ERROR benchmark: --interactions and --features (or the config benchmark block) are required")
        return EXIT_CONFIG
    if not args.interactions:
        interactions = resolve_path(spec.dataset_path, interactions)
    if not args.features:
        features = resolve_path(spec.dataset_path, features)
    k = args.k or (settings.k if settings else 20)
    hp = VBPRHyperParams()
    if settings is not None:
        hp = VBPRHyperParams(settings.factors, settings.feature_factors, settings.learning_rate,
                             settings.reg, settings.epochs)
    if args.epochs is not None:
        hp = replace(hp, epochs=args.epochs)

    try:
        data = load_interactions(interactions)
        store = EmbeddingStore.open(features)
        result = run_benchmark(data, store, hp, args.seed, k)
    except MissingEmbeddingError as exc:
        print(f"ERROR missing embedding for item {exc.item_id}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"ERROR training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IngestError, StoreError, OSError, ValueError) as exc:
        print(f"ERROR {exc}", file=sys.stderr)
        return EXIT_IO

    out = Path(args.out) if args.out else Path(spec.dataset_path) / "benchmark"
    write_report(result.report, out)
    report = result.report
    for name in ("recall", "precision", "ndcg", "hit_rate"):
        print(f"metric={name} k={k} value={getattr(report, name)!r}")
    print(f"users={report.n_users} report={out}")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "extract": cmd_extract,
    "fuse": cmd_fuse,
    "benchmark": cmd_benchmark,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
