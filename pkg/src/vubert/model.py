"""The unified vision-dialog model: parameters plus a batched forward pass."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vubert.embeddings import (
    EmbeddingTables, ImageRaster, PatchEmbedConfig, Vocab, patch_project, patchify, tokenize,
)
from vubert.encoder import (
    NEG_INF, PATCH, AssembledSequence, EncoderConfig, encoder_forward, init_layer_weights,
)
from vubert.errors import ShapeError
from vubert.tensor import Tensor, add, concat, embedding_lookup, matmul, reshape, transpose


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    dropout: float = 0.0
    max_len: int = 256
    patch: int = 8
    channels: int = 3
    init_std: float = 0.1

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.layers, self.heads, self.hidden, self.ffn, self.dropout, self.max_len)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


PAPER_BASE = ModelConfig(layers=12, heads=12, hidden=768, ffn=3072, dropout=0.1, max_len=512, patch=32, channels=3,
                         init_std=0.02)


class VUBert:
    """Embedding tables, patch projection, transformer layers and the tied MLM head."""

    def __init__(self, config: ModelConfig, vocab: Vocab, rng: np.random.Generator | None = None):
        self.config = config
        self.vocab = vocab
        rng = rng if rng is not None else np.random.default_rng(0)
        std = config.init_std
        self.tables = EmbeddingTables.init(len(vocab), config.max_len, config.hidden, rng, std)
        self.patch_cfg = PatchEmbedConfig.init(config.patch, config.channels, config.hidden, rng, std)
        self.layers = [init_layer_weights(config.encoder, rng, prefix=f"layer{i}.", std=std)
                       for i in range(config.layers)]
        self.mlm_bias = Tensor(np.zeros(len(vocab)), requires_grad=True, name="mlm.bias")

    # ------------------------------------------------------------ parameters

    def named_params(self) -> dict[str, Tensor]:
        params = {"emb.word": self.tables.word, "emb.position": self.tables.position,
                  "emb.segment": self.tables.segment, "patch.w": self.patch_cfg.weight,
                  "patch.b": self.patch_cfg.bias}
        for i, layer in enumerate(self.layers):
            for key, t in layer.items():
                params[f"layer{i}.{key}"] = t
        params["mlm.bias"] = self.mlm_bias
        return params

    def n_params(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_params().items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape}, model shape {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    # ------------------------------------------------------------ forward

    def tokens(self, text: str) -> list[int]:
        return tokenize(text, self.vocab)

    def patches(self, image: ImageRaster | None) -> Tensor | None:
        if image is None:
            return None
        if image.channels != self.config.channels:
            raise ShapeError(f"model expects {self.config.channels} channels, image has {image.channels}")
        return patchify(image, self.config.patch)

    def n_patches(self, image: ImageRaster | None) -> int:
        if image is None:
            return 0
        return (image.height // self.config.patch) * (image.width // self.config.patch)

    def embed(self, seqs: Sequence[AssembledSequence], images: Sequence[ImageRaster | None]) -> Tensor:
        """``(B, L, D)`` rows for already length-aligned sequences.

        Patch rows come from one projection over all images of the batch and
        are gathered into place together with the word rows.
        """
        ids = np.stack([s.ids for s in seqs])
        positions = np.stack([s.positions for s in seqs])
        segments = np.stack([s.segments for s in seqs])
        index = ids.copy()
        raw = []
        offset = len(self.vocab)
        for b, (seq, img) in enumerate(zip(seqs, images)):
            lo, hi = seq.regions["image"]
            if hi == lo:
                continue
            patches = self.patches(img)
            if patches is None or patches.shape[0] != hi - lo:
                raise ShapeError(f"sequence {b} has {hi - lo} patch slots but image gives "
                                 f"{None if patches is None else patches.shape[0]} patches")
            raw.append(patches.data)
            index[b, lo:hi] = offset + np.arange(hi - lo)
            offset += hi - lo
        table = self.tables.word
        if raw:
            projected = patch_project(Tensor(np.concatenate(raw)), self.patch_cfg)
            table = concat([table, projected], axis=0)
        if (index == PATCH).any():
            raise ShapeError("patch slot left without a projected patch")
        rows = add(embedding_lookup(table, index), embedding_lookup(self.tables.position, positions))
        return add(rows, embedding_lookup(self.tables.segment, segments))

    def encode(self, seqs: Sequence[AssembledSequence], images: Sequence[ImageRaster | None],
               masks: Sequence[np.ndarray], training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Pad to a common length, embed and run the encoder; returns ``(B, L, D)``."""
        length = max(len(s) for s in seqs)
        padded = [s.padded(length) for s in seqs]
        full = np.zeros((len(seqs), length, length))
        for b, (s, m) in enumerate(zip(seqs, masks)):
            n = len(s)
            full[b, :n, :n] = m
            if length > n:
                full[b, :, n:] = NEG_INF
        rows = self.embed(padded, images)
        return encoder_forward(rows, full, self.config.encoder, self.layers, training, rng)

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Tied output embedding: ``hidden @ word^T + bias``."""
        if hidden.ndim == 1:
            return reshape(self.mlm_logits(reshape(hidden, (1, hidden.shape[0]))), (len(self.vocab),))
        return add(matmul(hidden, transpose(self.tables.word)), self.mlm_bias)
