"""Fixture generators shared by the test modules."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

TOY_CONFIG = """\
dataset_path: ./my/dataset/path
gpu list: 0
visual:
 items:
  input_path:  images
  output_path: visual_embeddings
  model: [
    { model_name: ResNet18, output_layers: avgpool,
      reshape: [224, 224], backend: {visual_backend}, preprocessing: zscore,
      mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] },
    { model_name: ./MyCustomNetWeights.pt, backend: {visual_backend},
      output_layers: pooler_output, preprocessing: minmax },
    { model_name: ./MyCustomHFModel, backend: {hf_backend},
      output_layers: [MyCustomOutputLayer, avgpool],
      image_processor: ./MyCustomImageProcessor } ]
textual:
 items:
  input_path:  descriptions.tsv
  output_path: textual_embeddings
  item_column: asin
  text_column: description
  model: [
   { model_name: ./MyCustomHFModel, clear_text: False,
     output_layers: MyCustomOutputLayer, backend: {hf_backend},
     tokenizer_name: ./MyCustomTokenizer } ]
visual_textual:
 items:
  input_path:  { visual: images, textual: meta.tsv }
  output_path: { visual: vis_embeddings, textual: text_embeddings }
  item_column: asin
  text_column: description
  model: [
   { model_name: openai/clip-vit-base-patch16, fusion: concat,
     output_layers: 1, backend: {hf_backend}  } ]
"""


def toy_config(visual_backend: str = "graph", hf_backend: str = "graph") -> str:
    return TOY_CONFIG.replace("{visual_backend}", visual_backend).replace("{hf_backend}", hf_backend)


def write_png(path: Path, array: np.ndarray) -> Path:
    """``array`` is (H, W, 3) uint8 or (H, W) for grayscale."""
    Image.fromarray(array).save(path)
    return path


def make_image_dir(root: Path, n: int, size: int = 12, seed: int = 0, prefix: str = "item") -> list[str]:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for k in range(n):
        item_id = f"{prefix}{k:03d}"
        write_png(root / f"{item_id}.png", rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
        ids.append(item_id)
    return ids


def write_tsv(path: Path, header: list[str], rows: list[list[str]]) -> Path:
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def planted_dataset(root: Path, seed: int = 0, n_users: int = 200, n_items: int = 60,
                    factors: int = 8, size: int = 16):
    """Items rendered from hidden factors; each user interacts with the top
    quartile of items by dot product with hidden user factors.

    Returns the interaction pairs; images land in ``root / "images"``.
    """
    rng = np.random.default_rng(seed)
    item_f = rng.normal(size=(n_items, factors))
    user_f = rng.normal(size=(n_users, factors))
    mixing = rng.normal(size=(3 * size * size, factors))
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    item_ids = [f"i{k:03d}" for k in range(n_items)]
    for item_id, f in zip(item_ids, item_f):
        pixels = 1.0 / (1.0 + np.exp(-(mixing @ f) / np.sqrt(factors)))
        arr = np.round(pixels * 255).astype(np.uint8).reshape(size, size, 3)
        write_png(images / f"{item_id}.png", arr)
    affinity = user_f @ item_f.T
    quota = n_items // 4
    pairs = []
    for u in range(n_users):
        top = np.argsort(-affinity[u], kind="stable")[:quota]
        pairs += [(f"u{u:03d}", item_ids[i]) for i in sorted(top)]
    return pairs
