import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfex.config import ModelSpec, parse_config
from mmfex.extract import (
    ExtractionError,
    ExtractionRun,
    ExtractorError,
    GraphExtractor,
    ReferenceExtractor,
    build_extractor,
    extract_batch,
    run_extraction,
    save_graph,
)
from mmfex.hashing import SplitMix64, mix
from mmfex.ingest import Batch, LoaderSpec
from mmfex.preprocess import tokenize
from mmfex.store import EmbeddingStore, read_manifest

from synthetic import make_image_dir, write_tsv


def _spec(name, backend="reference", layers=("proj",)):
    return ModelSpec(model_name=name, backend=backend, output_layers=list(layers))


def _oracle_proj(x, seed, dim):
    """e = A x / sqrt(n), entries drawn one SplitMix64 stream at a time."""
    n = x.size
    e = np.zeros(dim)
    for i in range(dim):
        acc = 0.0
        for j in range(n):
            acc += SplitMix64(mix(seed, i * n + j)).uniform(-1.0, 1.0) * x[j]
        e[i] = acc
    return e / math.sqrt(n)


def test_presets_declare_layers_and_dims():
    ex = build_extractor(_spec("ref-linear-2048"), 42, "visual")
    assert ex.declared_layers == ("proj", "relu")
    assert ex.output_dim("proj") == 2048 and ex.output_dim(1) == 2048
    assert build_extractor(_spec("ref-linear-768"), 42, "textual").output_dim("proj") == 768
    clip = build_extractor(_spec("ref-clip-512"), 42, "visual_textual")
    assert clip.paired and clip.output_dim("proj") == (512, 512)
    assert build_extractor(_spec("ref-linear"), 42, "visual").dim == 64


def test_build_extractor_errors(tmp_path):
    missing = tmp_path / "nope.npz"
    with pytest.raises(ExtractorError, match="nope.npz"):
        build_extractor(_spec(str(missing), backend="graph", layers=("fc",)), 42, "visual")
    with pytest.raises(ExtractorError, match="not declared"):
        build_extractor(_spec("ref-linear", layers=("avgpool",)), 42, "visual")
    with pytest.raises(ExtractorError, match="does not support"):
        build_extractor(_spec("ref-linear"), 42, "visual_textual")
    with pytest.raises(ExtractorError, match="out of range"):
        build_extractor(_spec("ref-linear", layers=(2,)), 42, "visual")


def test_reference_matches_scalar_oracle():
    ex = ReferenceExtractor("ref-linear-5", "visual", seed=7)
    x = np.random.default_rng(3).normal(size=(3, 2, 2))
    out = extract_batch(ex, Batch(0, (("a", x),)), ["proj"])[0]
    assert np.allclose(out.vectors[0], _oracle_proj(x.reshape(-1), 7, 5), rtol=0, atol=1e-13)


def test_reference_text_input_is_scaled_ids():
    ex = ReferenceExtractor("ref-linear-4", "textual", seed=11)
    seq = tokenize("blue cup")
    out = ex.forward([seq], ["proj"])["proj"][0]
    x = np.asarray(seq.ids, dtype=np.float64) / seq.vocab_size
    assert np.allclose(out, _oracle_proj(x, 11, 4), rtol=0, atol=1e-13)


def test_zero_input_gives_zero_vector():
    ex = ReferenceExtractor("ref-linear-16", "visual", seed=42)
    out = extract_batch(ex, Batch(0, (("z", np.zeros((3, 4, 4))),)), ["proj", "relu"])
    assert [b.layer for b in out] == ["proj", "relu"]
    assert all(np.array_equal(b.vectors, np.zeros((1, 16))) for b in out)


def test_determinism_and_relu_clamp():
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    batch = Batch(0, (("a", x), ("b", -x)))
    r1 = extract_batch(ReferenceExtractor("ref-linear-32", "visual", 5), batch, ["proj", "relu"])
    r2 = extract_batch(ReferenceExtractor("ref-linear-32", "visual", 5), batch, ["proj", "relu"])
    assert r1[0].item_ids == ("a", "b")
    assert r1[0].vectors.tobytes() == r2[0].vectors.tobytes()
    proj, relu = r1[0].vectors, r1[1].vectors
    assert (proj < 0).any()
    assert np.array_equal(relu, np.maximum(proj, 0.0))


def test_seed_changes_output():
    x = np.ones((3, 4, 4))
    a = ReferenceExtractor("ref-linear-8", "visual", 1).forward([x], ["proj"])["proj"]
    b = ReferenceExtractor("ref-linear-8", "visual", 2).forward([x], ["proj"])["proj"]
    assert not np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-6), st.integers(0, 2**32))
def test_linearity(alpha, seed):
    ex = ReferenceExtractor("ref-linear-8", "visual", 42)
    x = np.random.default_rng(seed).normal(size=(3, 3, 3))
    e1 = ex.forward([alpha * x], ["proj"])["proj"][0]
    e2 = alpha * ex.forward([x], ["proj"])["proj"][0]
    assert np.max(np.abs(e1 - e2)) <= 1e-9 * max(np.max(np.abs(e2)), 1e-300)


def test_paired_streams_use_distinct_projections():
    ex = ReferenceExtractor("ref-clip-6", "visual_textual", 42)
    img = np.ones((3, 2, 2))
    seq = tokenize("a")
    vis, txt = ex.forward([(img, seq)], ["proj"])["proj"]
    assert vis.shape == (1, 6) and txt.shape == (1, 6)
    single = ReferenceExtractor("ref-linear-6", "visual", 42).forward([img], ["proj"])["proj"]
    assert not np.array_equal(vis, single)


# --------------------------------------------------------------------------
# graph backend


def _graph_file(tmp_path, dim=5):
    rng = np.random.default_rng(0)
    graph = {
        "format": "mmfex-graph", "version": 1,
        "inputs": {"image": {"shape": [3, 4, 4]}},
        "nodes": [
            {"name": "flat", "op": "flatten", "inputs": ["image"]},
            {"name": "fc", "op": "linear", "inputs": ["flat"], "weight": "fc.w", "bias": "fc.b"},
            {"name": "act", "op": "relu", "inputs": ["fc"]},
        ],
        "outputs": {"fc": "fc", "avgpool": "act"},
    }
    weights = {"fc.w": rng.normal(size=(dim, 48)), "fc.b": rng.normal(size=dim)}
    return save_graph(tmp_path / "net.npz", graph, weights), weights


def test_graph_backend_evaluates_nodes(tmp_path):
    path, w = _graph_file(tmp_path)
    ex = GraphExtractor(path, "visual")
    assert ex.declared_layers == ("fc", "avgpool")
    assert ex.default_reshape == (4, 4)
    x = np.random.default_rng(1).random((3, 4, 4))
    out = extract_batch(ex, Batch(0, (("a", x),)), ["fc", 1])
    expected = w["fc.w"] @ x.reshape(-1) + w["fc.b"]
    assert np.allclose(out[0].vectors[0], expected, atol=1e-12)
    assert np.allclose(out[1].vectors[0], np.maximum(expected, 0), atol=1e-12)
    assert ex.output_dim("fc") == 5
    with pytest.raises(ExtractorError, match="does not support"):
        GraphExtractor(path, "textual")


def test_graph_backend_in_pipeline(tmp_path):
    _graph_file(tmp_path)
    make_image_dir(tmp_path / "images", 3, size=6)
    cfg = parse_config(f"""
dataset_path: {tmp_path}
visual:
  items:
    input_path: images
    output_path: out
    model: [{{model_name: net.npz, backend: graph, output_layers: avgpool}}]
""")
    manifests = run_extraction(ExtractionRun(cfg, seed=1))
    assert len(manifests) == 1 and manifests[0].dim == 5


# --------------------------------------------------------------------------
# orchestration


def _visual_config(root, n_items=5, model="ref-linear-32", layers="proj", workers=1):
    make_image_dir(root / "images", n_items, size=10)
    return parse_config(f"""
dataset_path: {root}
loader: {{batch_size: 2, workers: {workers}}}
visual:
  items:
    input_path: images
    output_path: visual_embeddings
    model: [{{model_name: {model}, backend: reference, output_layers: {layers}, reshape: [8, 8]}}]
""")


def test_run_extraction_counts_artifacts(tmp_path):
    cfg = _visual_config(tmp_path)
    manifests = run_extraction(ExtractionRun(cfg, seed=42))
    assert len(manifests) == 1
    out = tmp_path / "visual_embeddings" / "ref-linear-32" / "proj"
    assert len(list(out.glob("*.emb"))) == 5
    m = read_manifest(out)
    assert m.dim == 32 and len(m.rows) == 5
    assert m.meta["modality"] == "visual" and m.meta["seed"] == "42"
    assert m.item_ids == [f"item{k:03d}" for k in range(5)]


def test_stored_vectors_match_direct_extraction(tmp_path):
    from mmfex.ingest import decode_image
    from mmfex.preprocess import ImagePipeline

    cfg = _visual_config(tmp_path, n_items=3)
    run_extraction(ExtractionRun(cfg, seed=9))
    store = EmbeddingStore.open(tmp_path / "visual_embeddings" / "ref-linear-32" / "proj")
    ex = ReferenceExtractor("ref-linear-32", "visual", 9)
    for item in store.item_ids:
        x = ImagePipeline((8, 8))(decode_image(tmp_path / "images" / f"{item}.png"))
        direct = ex.forward([x], ["proj"])["proj"][0].astype(np.float32)
        assert store.get(item).tobytes() == direct.tobytes()


def test_two_layers_two_manifests(tmp_path):
    cfg = _visual_config(tmp_path, layers="[proj, relu]")
    manifests = run_extraction(ExtractionRun(cfg))
    assert [m.meta["layer"] for m in manifests] == ["proj", "relu"]


def _paired_config(root, n_items=4, fusion="concat", extra_text=()):
    ids = make_image_dir(root / "images", n_items, size=8)
    rows = [[i, f"description of {i}"] for i in ids] + [list(r) for r in extra_text]
    write_tsv(root / "meta.tsv", ["asin", "description"], rows)
    return parse_config(f"""
dataset_path: {root}
visual_textual:
  items:
    input_path: {{visual: images, textual: meta.tsv}}
    output_path: {{visual: vis_embeddings, textual: text_embeddings}}
    model: [{{model_name: ref-clip-512, backend: reference, output_layers: proj, fusion: {fusion}}}]
"""), ids


def test_visual_textual_concat_fusion(tmp_path):
    cfg, ids = _paired_config(tmp_path, extra_text=[("orphan", "text only")])
    manifests = run_extraction(ExtractionRun(cfg))
    streams = {m.meta["stream"]: m for m in manifests}
    assert set(streams) == {"visual", "textual", "fused"}
    assert streams["visual"].dim == 512 and streams["textual"].dim == 512
    assert streams["fused"].dim == 1024
    # coverage: every aligned item exactly once, the text-only row is dropped
    for m in manifests:
        assert m.item_ids == ids
    fused_dir = tmp_path / "vis_embeddings_text_embeddings_concat" / "ref-clip-512" / "proj"
    fused = EmbeddingStore.open(fused_dir)
    vis = EmbeddingStore.open(tmp_path / "vis_embeddings" / "ref-clip-512" / "proj")
    txt = EmbeddingStore.open(tmp_path / "text_embeddings" / "ref-clip-512" / "proj")
    for item in ids:
        assert np.array_equal(fused.get(item), np.concatenate([vis.get(item), txt.get(item)]))


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_workers_do_not_change_output_bytes(tmp_path):
    cfg = _visual_config(tmp_path / "data", n_items=12)
    trees = []
    for workers in (1, 4):
        out = tmp_path / f"out{workers}"
        run_extraction(ExtractionRun(cfg, seed=3, out_root=out),
                       LoaderSpec(batch_size=3, workers=workers, prefetch_depth=2))
        trees.append(_tree_bytes(out))
    assert trees[0] == trees[1] and len(trees[0]) == 13


def test_errors_are_annotated(tmp_path):
    cfg = _visual_config(tmp_path, n_items=3)
    (tmp_path / "images" / "item001.png").write_bytes(b"not an image")
    with pytest.raises(ExtractionError) as info:
        run_extraction(ExtractionRun(cfg))
    err = info.value
    assert err.modality == "visual" and err.model_name == "ref-linear-32"
    assert err.item_id == "item001"
    assert "item=item001" in str(err)


def test_missing_source_is_annotated(tmp_path):
    cfg = parse_config(f"""
dataset_path: {tmp_path}
textual:
  items:
    input_path: missing.tsv
    output_path: t
    model: [{{model_name: ref-linear-8, backend: reference, output_layers: proj}}]
""")
    with pytest.raises(ExtractionError, match="modality=textual"):
        run_extraction(ExtractionRun(cfg))
