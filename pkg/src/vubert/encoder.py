"""Unified input sequence, attention masks and the post-norm transformer stack.

The sequence layout is::

    [CLS] v_1 .. v_N [EOI] C [SEP] u_1 [SEP] u_2 .. [SEP] u_m [END]

with ``u_1 .. u_{m-1}`` the flattened dialog history and ``u_m`` the current
question. When an answer is attached for generation or masked-LM training it
becomes one more utterance, ``.. [SEP] u_m [SEP] a_1 .. a_k [END]``, and the
answer region spans ``a_1 .. a_k`` plus the closing ``[END]``.

Position ids run 0..L-1 over the whole sequence. ``[CLS]``, patches and
``[EOI]`` carry segment 0; everything else carries segment 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vubert.embeddings import (
    CLS, END, EOI, PAD, SEP, SEGMENT_TEXT, SEGMENT_VISION,
    EmbeddingTables, embed_patches, embed_tokens,
)
from vubert.errors import ContractError, ShapeError, TruncationError
from vubert.tensor import (
    Tensor, add, concat, dropout, gelu, layer_norm, matmul, reshape, scale, slice_, softmax, transpose,
)

PATCH = -1  # id placeholder for patch positions
NEG_INF = -1e9  # finite stand-in for -inf; exp() of it underflows to exactly 0


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    dropout: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")


@dataclass
class AssembledSequence:
    ids: np.ndarray  # token ids, PATCH at patch positions, PAD after the real length
    positions: np.ndarray
    segments: np.ndarray
    regions: dict[str, tuple[int, int]]  # half-open [start, stop)
    cls: int = 0
    eoi: int = 0
    seps: list[int] = field(default_factory=list)
    end: int = 0
    utterances: list[tuple[int, int]] = field(default_factory=list)
    maskable: np.ndarray | None = None  # text positions eligible for MLM corruption
    rows: Tensor | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_patches(self) -> int:
        lo, hi = self.regions["image"]
        return hi - lo

    @property
    def has_answer(self) -> bool:
        return "answer" in self.regions

    def with_ids(self, ids: np.ndarray) -> AssembledSequence:
        """Same layout, different token ids (used for masking and answer substitution)."""
        return AssembledSequence(np.asarray(ids, dtype=np.int64), self.positions, self.segments, self.regions,
                                 self.cls, self.eoi, self.seps, self.end, self.utterances, self.maskable)

    def padded(self, length: int) -> AssembledSequence:
        extra = length - len(self.ids)
        if extra < 0:
            raise ShapeError(f"cannot pad a length-{len(self.ids)} sequence to {length}")
        if extra == 0:
            return self
        pad = lambda a, v: np.concatenate([a, np.full(extra, v, dtype=a.dtype)])
        return AssembledSequence(pad(self.ids, PAD), pad(self.positions, 0), pad(self.segments, SEGMENT_TEXT),
                                 self.regions, self.cls, self.eoi, self.seps, self.end, self.utterances,
                                 pad(self.maskable, False))


def layout_sequence(n_patches: int, caption: Sequence[int], history: Sequence[Sequence[int]],
                    current: Sequence[int], answer: Sequence[int] | None = None,
                    max_len: int | None = None) -> AssembledSequence:
    """Token-level layout without embedding; see the module docstring for the order."""
    ids: list[int] = [CLS] + [PATCH] * n_patches + [EOI]
    regions = {"image": (1, 1 + n_patches)}
    eoi = n_patches + 1
    start = len(ids)
    ids += list(caption)
    regions["caption"] = (start, len(ids))
    seps: list[int] = []
    utterances: list[tuple[int, int]] = []
    maskable = [False] * len(ids)
    maskable[start:] = [True] * len(caption)

    def push_utterance(tokens):
        seps.append(len(ids))
        ids.append(SEP)
        maskable.append(False)
        lo = len(ids)
        ids.extend(tokens)
        maskable.extend([True] * len(tokens))
        utterances.append((lo, len(ids)))
        return lo, len(ids)

    hist_lo = len(ids) + 1
    for utt in history:
        push_utterance(utt)
    regions["history"] = (hist_lo, len(ids)) if history else (len(ids), len(ids))
    regions["current"] = push_utterance(current)
    if answer is not None:
        lo, _ = push_utterance(answer)
        ids.append(END)
        maskable.append(True)  # the closing [END] is predictable so generation can stop
        regions["answer"] = (lo, len(ids))
    else:
        ids.append(END)
        maskable.append(False)
    end = len(ids) - 1
    length = len(ids)
    if max_len is not None and length > max_len:
        raise TruncationError(f"assembled sequence has {length} positions, budget is max_len={max_len}")
    segments = np.full(length, SEGMENT_TEXT, dtype=np.int64)
    segments[:eoi + 1] = SEGMENT_VISION
    return AssembledSequence(np.asarray(ids, dtype=np.int64), np.arange(length, dtype=np.int64), segments,
                             regions, 0, eoi, seps, end, utterances, np.asarray(maskable, dtype=bool))


def embed_sequence(seq: AssembledSequence, visual: Tensor | None, tables: EmbeddingTables) -> Tensor:
    """Rows of the unified sequence: text via word tables, patches via the projected ``visual``."""
    lo, hi = seq.regions["image"]
    if hi - lo and (visual is None or visual.shape[0] != hi - lo):
        raise ShapeError(f"sequence expects {hi - lo} patch rows, got {None if visual is None else visual.shape}")
    pieces = [embed_tokens(seq.ids[:lo], tables, seq.positions[:lo], seq.segments[:lo])]
    if hi > lo:
        pieces.append(embed_patches(visual, tables, seq.positions[lo:hi]))
    pieces.append(embed_tokens(seq.ids[hi:], tables, seq.positions[hi:], seq.segments[hi:]))
    return concat(pieces, axis=0)


def assemble_sequence(visual: Tensor | None, caption: Sequence[int], history: Sequence[Sequence[int]],
                      current: Sequence[int], tables: EmbeddingTables, answer: Sequence[int] | None = None,
                      max_len: int | None = None) -> AssembledSequence:
    n = 0 if visual is None else visual.shape[0]
    if max_len is None:
        max_len = tables.position.shape[0]
    seq = layout_sequence(n, caption, history, current, answer, max_len=max_len)
    seq.rows = embed_sequence(seq, visual, tables)
    return seq


# ---------------------------------------------------------------- masks

def build_bidirectional_mask(seq: AssembledSequence) -> np.ndarray:
    n = len(seq.ids)
    mask = np.zeros((n, n))
    mask[:, seq.ids == PAD] = NEG_INF
    return mask


def seq2seq_mask(context_len: int, answer_len: int, total_len: int | None = None) -> np.ndarray:
    """Context sees only context; answer row i sees context and answer positions <= i."""
    n = context_len + answer_len
    total = n if total_len is None else total_len
    mask = np.zeros((total, total))
    mask[:context_len, context_len:n] = NEG_INF
    if answer_len:
        block = np.triu(np.ones((answer_len, answer_len), dtype=bool), k=1)
        mask[context_len:n, context_len:n][block] = NEG_INF
    mask[:, n:] = NEG_INF
    return mask


def build_seq2seq_mask(seq: AssembledSequence) -> np.ndarray:
    if "answer" not in seq.regions:
        raise ContractError("seq2seq mask needs a sequence with an answer region")
    lo, hi = seq.regions["answer"]
    mask = seq2seq_mask(lo, hi - lo, len(seq.ids))
    mask[:, seq.ids == PAD] = NEG_INF
    return mask


def mask_to_text(mask: np.ndarray) -> str:
    """Debug rendering: ``0`` for visible, ``X`` for blocked."""
    return "\n".join("".join("X" if v <= NEG_INF / 2 else "0" for v in row) for row in mask)


# ---------------------------------------------------------------- transformer

LAYER_PARAMS = ("qkv.w", "qkv.b", "out.w", "out.b", "ln1.g", "ln1.b",
                "ffn1.w", "ffn1.b", "ffn2.w", "ffn2.b", "ln2.g", "ln2.b")


def init_layer_weights(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "",
                       std: float = 0.02) -> dict[str, Tensor]:
    d, f = cfg.hidden, cfg.ffn
    shapes = {"qkv.w": (d, 3 * d), "qkv.b": (3 * d,), "out.w": (d, d), "out.b": (d,),
              "ln1.g": (d,), "ln1.b": (d,), "ffn1.w": (d, f), "ffn1.b": (f,),
              "ffn2.w": (f, d), "ffn2.b": (d,), "ln2.g": (d,), "ln2.b": (d,)}
    weights = {}
    for key in LAYER_PARAMS:
        shape = shapes[key]
        if key.endswith(".w"):
            data = rng.normal(0.0, std, size=shape)
        elif key.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        weights[key] = Tensor(data, requires_grad=True, name=prefix + key)
    return weights


def key_bias_indices(hidden: int) -> np.ndarray:
    """Flat indices of the key part of ``qkv.b``.

    Adding a constant to every key shifts each score row uniformly, which
    softmax ignores, so these entries always receive an exactly-zero gradient.
    """
    return np.arange(hidden, 2 * hidden)


def attention_layer(x: Tensor, mask: np.ndarray, weights: dict[str, Tensor], heads: int,
                    p: float = 0.0, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """One post-norm block: multi-head self-attention, then a GELU feed-forward.

    ``x`` is ``(L, D)`` or ``(B, L, D)``; ``mask`` is the matching additive
    ``(L, L)`` or ``(B, L, L)`` matrix.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        mask = mask[None]
    b, n, d = x.shape
    if mask.shape != (b, n, n):
        raise ShapeError(f"attention mask {mask.shape} does not match input {x.shape}")
    if d % heads or weights["qkv.w"].shape != (d, 3 * d):
        raise ShapeError(f"hidden size {d} incompatible with {heads} heads / qkv weight {weights['qkv.w'].shape}")
    dh = d // heads
    qkv = add(matmul(x, weights["qkv.w"]), weights["qkv.b"])
    qkv = transpose(reshape(qkv, (b, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = slice_(qkv, 0), slice_(qkv, 1), slice_(qkv, 2)
    scores = add(scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh)), Tensor(mask[:, None]))
    attn = dropout(softmax(scores, axis=-1), p, training, rng)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    out = dropout(add(matmul(ctx, weights["out.w"]), weights["out.b"]), p, training, rng)
    h = layer_norm(add(x, out), weights["ln1.g"], weights["ln1.b"])
    ff = gelu(add(matmul(h, weights["ffn1.w"]), weights["ffn1.b"]))
    ff = dropout(add(matmul(ff, weights["ffn2.w"]), weights["ffn2.b"]), p, training, rng)
    y = layer_norm(add(h, ff), weights["ln2.g"], weights["ln2.b"])
    return reshape(y, (n, d)) if squeeze else y


def encoder_forward(seq: AssembledSequence | Tensor, mask: np.ndarray, cfg: EncoderConfig,
                    weights: Sequence[dict[str, Tensor]], training: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Stack of ``cfg.layers`` blocks over the embedded rows; returns ``H``."""
    x = seq.rows if isinstance(seq, AssembledSequence) else seq
    if x is None:
        raise ContractError("sequence has not been embedded")
    for layer in weights[:cfg.layers]:
        x = attention_layer(x, mask, layer, cfg.heads, cfg.dropout, training, rng)
    return x
