"""Image normalisation/resizing and text cleaning/tokenisation.

All functions are pure; images are float (3, H, W) arrays.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from mmfex.hashing import fnv1a_64

REFERENCE_TOKENIZER = "reference-hash"
REFERENCE_VOCAB_SIZE = 50021
MAX_TOKENS = 32


class PreprocessError(ValueError):
    pass


# --------------------------------------------------------------------------
# images


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the borders
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_image(img: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image to ``target = (h, w)``."""
    h, w = int(target[0]), int(target[1])
    if h <= 0 or w <= 0:
        raise PreprocessError(f"resize target must be positive, got {tuple(target)}")
    img = np.asarray(img, dtype=np.float64)
    if img.shape[1:] == (h, w):
        return img.copy()
    lo_y, hi_y, fy = _axis_weights(img.shape[1], h)
    lo_x, hi_x, fx = _axis_weights(img.shape[2], w)
    fy = fy[None, :, None]
    rows = img[:, lo_y, :] * (1.0 - fy) + img[:, hi_y, :] * fy
    fx = fx[None, None, :]
    out = rows[:, :, lo_x] * (1.0 - fx) + rows[:, :, hi_x] * fx
    # exact on constant inputs: convex weights can otherwise drift by an ulp
    flat = img.reshape(img.shape[0], -1)
    constant = flat.min(axis=1) == flat.max(axis=1)
    if constant.any():
        out[constant] = flat[constant][:, :1, None]
    return out


def normalize_zscore(img: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != std.shape or mean.shape != (img.shape[0],):
        raise PreprocessError(
            f"mean/std need one entry per channel ({img.shape[0]}), got {mean.size} and {std.size}"
        )
    if np.any(std <= 0):
        raise PreprocessError("std entries must be strictly positive")
    return (img - mean[:, None, None]) / std[:, None, None]


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img)
    out = (img - lo) / (hi - lo)
    # pin extremes so min -> 0 and max -> 1 are exact
    out[img == lo] = 0.0
    out[img == hi] = 1.0
    return out


@dataclass(frozen=True)
class ImagePipeline:
    """Resize then normalise. Picklable, so it can run inside loader workers."""

    reshape: tuple[int, int] | None = None
    kind: str | None = None
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __call__(self, img: np.ndarray) -> np.ndarray:
        if self.reshape is not None:
            img = resize_image(img, self.reshape)
        if self.kind == "zscore":
            img = normalize_zscore(img, self.mean, self.std)
        elif self.kind == "minmax":
            img = normalize_minmax(img)
        return img


# --------------------------------------------------------------------------
# text

_TAG = re.compile(r"<[^>]*>")
_DISALLOWED = re.compile(r"[^a-z0-9 .,!?']")
_SPACES = re.compile(r"\s+")


def clean_text(s: str) -> str:
    s = _TAG.sub("", s)
    s = s.lower()
    s = _DISALLOWED.sub(" ", s)
    return _SPACES.sub(" ", s).strip()


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab_size: int

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Whitespace tokenizer with either hashed or vocabulary-file ids."""

    def __init__(self, name: str, vocab: dict[str, int] | None = None, max_length: int = MAX_TOKENS):
        self.name = name
        self.vocab = vocab
        self.max_length = max_length
        self.vocab_size = REFERENCE_VOCAB_SIZE if vocab is None else max(len(vocab), 1)

    def token_id(self, token: str) -> int:
        if self.vocab is None:
            return fnv1a_64(token) % REFERENCE_VOCAB_SIZE
        return self.vocab.get(token, 0)

    def __call__(self, s: str) -> TokenSequence:
        ids = [self.token_id(t) for t in s.lower().split()][: self.max_length]
        ids += [0] * (self.max_length - len(ids))
        return TokenSequence(tuple(ids), self.vocab_size)


@lru_cache(maxsize=32)
def _load_vocab(path: str) -> dict[str, int]:
    vocab: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for idx, line in enumerate(fh):
            token = line.rstrip("\r\n")
            vocab.setdefault(token, idx)
    return vocab


def get_tokenizer(tokenizer_id: str | None = None, base_dir: str | Path | None = None) -> Tokenizer:
    """Resolve ``reference-hash`` or a vocabulary file (one token per line)."""
    if tokenizer_id is None or tokenizer_id == REFERENCE_TOKENIZER:
        return Tokenizer(REFERENCE_TOKENIZER)
    candidates = [Path(tokenizer_id)]
    if base_dir is not None and not Path(tokenizer_id).is_absolute():
        candidates.append(Path(base_dir) / tokenizer_id)
    for p in candidates:
        if p.is_file():
            return Tokenizer(str(p), _load_vocab(str(p.resolve())))
    raise PreprocessError(f"cannot resolve tokenizer {tokenizer_id!r}")


def tokenize(s: str, tokenizer_id: str = REFERENCE_TOKENIZER) -> TokenSequence:
    return get_tokenizer(tokenizer_id)(s)


@dataclass(frozen=True)
class TextPipeline:
    tokenizer: Tokenizer
    clear_text: bool = False

    def __call__(self, s: str) -> TokenSequence:
        if self.clear_text:
            s = clean_text(s)
        return self.tokenizer(s)
