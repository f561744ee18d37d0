"""Token and patch embeddings.

Text is lowercased and split into word runs and single punctuation marks;
each token embeds as ``word + position + segment``. Images are cut into
``P x P`` patches in raster order over the patch grid (left to right, top to
bottom); a patch flattens row-major with channels innermost, then passes
through one shared linear projection and receives ``position + segment[0]``.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vubert.errors import DataError, ShapeError
from vubert.tensor import Tensor, add, embedding_lookup, matmul

PAD, CLS, SEP, END, EOI, MASK, UNK = range(7)
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[END]", "[EOI]", "[MASK]", "[UNK]")

SEGMENT_VISION = 0
SEGMENT_TEXT = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Vocab:
    """Token <-> id map with the reserved tokens pinned to ids 0..6."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str]) -> Vocab:
        """Vocabulary over ``texts`` in first-seen order (deterministic)."""
        vocab = cls()
        for text in texts:
            for w in split_words(text):
                vocab.add(w)
        return vocab

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:len(RESERVED)]) != RESERVED:
            raise DataError(f"{path}: vocab must start with the reserved tokens {RESERVED}")
        return cls(lines[len(RESERVED):])


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(w) for w in split_words(text)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return " ".join(vocab.itos[i] for i in ids)


# ---------------------------------------------------------------- images

@dataclass
class ImageRaster:
    pixels: np.ndarray  # H x W x C, floats in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ShapeError(f"raster must be H x W x C, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageRaster) and np.array_equal(self.pixels, other.pixels)


RASTER_MAGIC = b"VURASTER"


def write_raster(path: str | os.PathLike, img: ImageRaster) -> None:
    """``VURASTER`` magic, uint32 LE height/width/channels, then float64 LE pixels (H, W, C order)."""
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<III", img.height, img.width, img.channels))
        fh.write(np.ascontiguousarray(img.pixels, dtype="<f8").tobytes())


def read_raster(path: str | os.PathLike) -> ImageRaster:
    blob = Path(path).read_bytes()
    if blob[:8] != RASTER_MAGIC:
        raise DataError(f"{path}: not a raster file")
    h, w, c = struct.unpack("<III", blob[8:20])
    data = np.frombuffer(blob[20:], dtype="<f8")
    if data.size != h * w * c:
        raise DataError(f"{path}: expected {h * w * c} pixel values, found {data.size}")
    return ImageRaster(data.astype(np.float64).reshape(h, w, c))


def patchify(img: ImageRaster, patch: int) -> Tensor:
    """Split into ``N = H*W/P^2`` flattened patches, shape ``(N, P*P*C)``."""
    h, w, c = img.pixels.shape
    if patch <= 0 or h % patch or w % patch:
        raise ShapeError(f"patch size P={patch} must divide H={h} and W={w}")
    gh, gw = h // patch, w // patch
    grid = img.pixels.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return Tensor(grid.reshape(gh * gw, patch * patch * c))


def unpatchify(patches: Tensor | np.ndarray, height: int, width: int, channels: int, patch: int) -> ImageRaster:
    data = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    gh, gw = height // patch, width // patch
    grid = data.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return ImageRaster(grid.reshape(height, width, channels))


@dataclass
class PatchEmbedConfig:
    patch: int
    channels: int
    hidden: int
    weight: Tensor  # (P*P*C) x D
    bias: Tensor  # D

    @classmethod
    def init(cls, patch: int, channels: int, hidden: int, rng: np.random.Generator, std: float = 0.02):
        fan_in = patch * patch * channels
        return cls(patch, channels, hidden,
                   Tensor(rng.normal(0.0, std, size=(fan_in, hidden)), requires_grad=True, name="patch.w"),
                   Tensor(np.zeros(hidden), requires_grad=True, name="patch.b"))

    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def patch_project(patches: Tensor, cfg: PatchEmbedConfig) -> Tensor:
    if patches.ndim != 2 or patches.shape[1] != cfg.weight.shape[0]:
        raise ShapeError(f"patch_project: patches {patches.shape} do not match projection {cfg.weight.shape}")
    return add(matmul(patches, cfg.weight), cfg.bias)


def count_patch_params(patch: int, channels: int, hidden: int) -> int:
    """Scalars in the patch projection: ``(P^2 * C) * D`` weights plus ``D`` biases."""
    return patch * patch * channels * hidden + hidden


@dataclass
class EmbeddingTables:
    word: Tensor  # V x D
    position: Tensor  # L_max x D
    segment: Tensor  # 2 x D

    @classmethod
    def init(cls, vocab_size: int, max_len: int, hidden: int, rng: np.random.Generator, std: float = 0.02):
        def table(rows, name):
            return Tensor(rng.normal(0.0, std, size=(rows, hidden)), requires_grad=True, name=name)

        return cls(table(vocab_size, "emb.word"), table(max_len, "emb.position"), table(2, "emb.segment"))


def embed_tokens(ids, tables: EmbeddingTables, positions, segments) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.size and not np.isin(segments, (SEGMENT_VISION, SEGMENT_TEXT)).all():
        raise IndexError(f"segment ids must be 0 or 1, got {sorted(set(segments.tolist()))}")
    out = add(embedding_lookup(tables.word, ids), embedding_lookup(tables.position, positions))
    return add(out, embedding_lookup(tables.segment, segments))


def embed_patches(projected: Tensor, tables: EmbeddingTables, positions) -> Tensor:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (projected.shape[0],):
        raise ShapeError(f"embed_patches: {projected.shape[0]} patches but {positions.shape} positions")
    out = add(projected, embedding_lookup(tables.position, positions))
    return add(out, embedding_lookup(tables.segment, np.full(len(positions), SEGMENT_VISION)))
