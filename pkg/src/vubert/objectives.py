"""Training objectives, the optimizer step, candidate ranking and answer generation.

Masked-LM runs over ``context + answer`` with the seq2seq mask so the answer
tokens learn to be predicted left to right; next-utterance retrieval scores
``dot(h_cls, c_i)`` between the bidirectionally encoded context and each
separately encoded candidate ``[CLS] tokens [END]``. Context and candidates
share one set of weights.
"""

from __future__ import annotations

import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from vubert.checkpoint import load_tensors, save_tensors
from vubert.data import DialogInstance
from vubert.embeddings import CLS, END, MASK, RESERVED, SEGMENT_TEXT
from vubert.encoder import (
    AssembledSequence, build_bidirectional_mask, build_seq2seq_mask, layout_sequence,
)
from vubert.errors import ContractError, TrainingError, TruncationError
from vubert.model import VUBert
from vubert.optim import AdamState, adam_step
from vubert.tensor import (
    Tensor, add, concat, cross_entropy, log_softmax, matmul, no_grad, reshape, scale, slice_,
)


@dataclass
class MlmBatch:
    original: np.ndarray
    corrupted: np.ndarray
    positions: np.ndarray  # masked indices k
    maskable: np.ndarray

    @property
    def skippable(self) -> bool:
        return len(self.positions) == 0


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or (self.alpha == 0 and self.beta == 0):
            raise ValueError(f"loss weights must be non-negative and not both zero, got {self}")


@dataclass
class EncodedContext:
    h_cls: Tensor


@dataclass
class EncodedCandidate:
    candidate_id: str
    vector: Tensor


def apply_mlm_masking(ids, maskable, rate: float, rng: np.random.Generator,
                      random_replace: bool = False, vocab_size: int | None = None) -> MlmBatch:
    """Select each maskable position with probability ``rate`` and replace it by ``[MASK]``.

    ``rate`` is a scalar or one probability per position. When nothing gets
    selected but something is maskable, one position is forced so the loss
    stays defined. ``random_replace`` switches on the 80/10/10
    mask/random/keep corruption (needs ``vocab_size``).
    """
    ids = np.asarray(ids, dtype=np.int64)
    rates = np.broadcast_to(np.asarray(rate, dtype=np.float64), ids.shape)
    if rates.size and not ((rates >= 0.0) & (rates < 1.0)).all():
        raise ValueError(f"mask rate must lie in [0, 1), got {rate}")
    maskable = np.asarray(maskable, dtype=bool)
    candidates = np.flatnonzero(maskable)
    chosen = candidates[rng.random(len(candidates)) < rates[candidates]]
    if len(chosen) == 0 and len(candidates):
        chosen = candidates[rng.integers(len(candidates))][None]
    corrupted = ids.copy()
    if random_replace and len(chosen):
        if vocab_size is None:
            raise ContractError("random_replace needs vocab_size")
        roll = rng.random(len(chosen))
        corrupted[chosen[roll < 0.8]] = MASK
        swap = chosen[(roll >= 0.8) & (roll < 0.9)]
        corrupted[swap] = rng.integers(len(RESERVED), vocab_size, size=len(swap))
    else:
        corrupted[chosen] = MASK
    return MlmBatch(ids, corrupted, chosen, maskable)


def mlm_loss(hidden: Tensor, mlm: MlmBatch, word: Tensor, bias: Tensor) -> Tensor:
    """Mean cross-entropy of the tied-embedding logits at the masked positions."""
    if mlm.skippable:
        raise ContractError("no masked positions; skip the MLM term for this batch")
    rows = slice_(hidden, mlm.positions)
    logits = add(matmul(rows, word.T), bias)
    return cross_entropy(logits, mlm.original[mlm.positions])


def total_loss(lm: Tensor, nur: Tensor, w: LossWeights) -> Tensor:
    return add(scale(lm, w.alpha), scale(nur, w.beta))


# ---------------------------------------------------------------- sequences for an instance

def context_layout(instance: DialogInstance, model: VUBert, answer: Sequence[int] | None = None) -> AssembledSequence:
    return layout_sequence(model.n_patches(instance.image), model.tokens(instance.caption),
                           [model.tokens(u) for u in instance.history], model.tokens(instance.question),
                           answer=answer, max_len=model.config.max_len)


def candidate_layout(ids: Sequence[int], max_len: int) -> AssembledSequence:
    """Standalone ``[CLS] tokens [END]`` sequence, all in the text segment."""
    if not len(ids):
        raise ContractError("candidate must have at least one token")
    n = len(ids) + 2
    if n > max_len:
        raise TruncationError(f"candidate needs {n} positions, budget is max_len={max_len}")
    seq_ids = np.asarray([CLS, *ids, END], dtype=np.int64)
    return AssembledSequence(seq_ids, np.arange(n, dtype=np.int64), np.full(n, SEGMENT_TEXT, dtype=np.int64),
                             {"image": (1, 1), "current": (1, n - 1)}, cls=0, eoi=0, end=n - 1,
                             maskable=np.zeros(n, dtype=bool))


def encode_context(instance: DialogInstance, model: VUBert, training: bool = False,
                   rng: np.random.Generator | None = None) -> EncodedContext:
    seq = context_layout(instance, model)
    hidden = model.encode([seq], [instance.image], [build_bidirectional_mask(seq)], training, rng)
    return EncodedContext(reshape(slice_(hidden, (0, 0)), (model.config.hidden,)))


def encode_candidates(texts: Sequence[str], model: VUBert, training: bool = False,
                      rng: np.random.Generator | None = None) -> list[Tensor]:
    """Encode candidates in groups of equal token length (no padding), one vector each."""
    token_lists = [model.tokens(t) or [model.vocab.id("[UNK]")] for t in texts]
    groups: dict[int, list[int]] = defaultdict(list)
    for i, ids in enumerate(token_lists):
        groups[len(ids)].append(i)
    out: list[Tensor | None] = [None] * len(texts)
    for _, members in sorted(groups.items()):
        seqs = [candidate_layout(token_lists[i], model.config.max_len) for i in members]
        masks = [build_bidirectional_mask(s) for s in seqs]
        hidden = model.encode(seqs, [None] * len(seqs), masks, training, rng)
        cls_rows = slice_(hidden, (slice(None), 0))
        for j, i in enumerate(members):
            out[i] = slice_(cls_rows, j)
    return out


def encode_candidate(text: str, model: VUBert) -> EncodedCandidate:
    return EncodedCandidate(text, encode_candidates([text], model)[0])


class CandidateCache:
    """Precomputed candidate vectors keyed by candidate text."""

    def __init__(self):
        self.vectors: dict[str, np.ndarray] = {}

    def __contains__(self, key: str) -> bool:
        return key in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def populate(self, texts: Iterable[str], model: VUBert, chunk: int = 256) -> CandidateCache:
        todo = sorted({t for t in texts if t not in self.vectors})
        with no_grad():
            for start in range(0, len(todo), chunk):
                part = todo[start:start + chunk]
                for text, vec in zip(part, encode_candidates(part, model)):
                    self.vectors[text] = vec.data.copy()
        return self

    def get(self, text: str, model: VUBert) -> np.ndarray:
        if text not in self.vectors:
            self.populate([text], model)
        return self.vectors[text]

    def save(self, path: str | os.PathLike, metadata: dict | None = None) -> None:
        save_tensors(path, {f"cand/{k}": v for k, v in sorted(self.vectors.items())}, metadata)

    @classmethod
    def load(cls, path: str | os.PathLike) -> CandidateCache:
        tensors, _ = load_tensors(path)
        cache = cls()
        cache.vectors = {k[len("cand/"):]: v for k, v in tensors.items() if k.startswith("cand/")}
        return cache


def nur_loss(ctx: EncodedContext, positive: EncodedCandidate, negatives: Sequence[EncodedCandidate]) -> Tensor:
    """``-log softmax`` over ``{positive} + negatives`` of the dot-product scores, at the positive."""
    if not negatives:
        raise ContractError("NUR needs at least one negative candidate")
    return _nur_from_vectors(ctx.h_cls, [positive.vector] + [n.vector for n in negatives])


def _nur_from_vectors(h_cls: Tensor, vectors: Sequence[Tensor]) -> Tensor:
    d = h_cls.shape[-1]
    cands = concat([reshape(v, (1, d)) for v in vectors], axis=0)
    scores = reshape(matmul(cands, reshape(h_cls, (d, 1))), (1, len(vectors)))
    return cross_entropy(scores, [0])


# ---------------------------------------------------------------- training

def _pick_negatives(instance: DialogInstance, batch: Sequence[DialogInstance], count: int,
                    rng: np.random.Generator) -> list[str]:
    answer = instance.answer
    own = sorted({c for c in instance.candidates if c != answer})
    picked = list(rng.choice(own, size=min(count, len(own)), replace=False)) if own else []
    if len(picked) < count:
        # fall back to utterances from other dialogs in the batch
        pool = sorted({u for other in batch if other is not instance
                       for u in [other.answer, *other.candidates] if u != answer and u not in picked})
        extra = min(count - len(picked), len(pool))
        if extra:
            picked += list(rng.choice(pool, size=extra, replace=False))
    return [str(p) for p in picked]


def batch_loss(batch: Sequence[DialogInstance], model: VUBert, weights: LossWeights, rng: np.random.Generator,
               mlm_rate: float = 0.15, negatives: int = 15, random_replace: bool = False,
               training: bool = True, answer_rate: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, mlm, nur)`` for one batch; the graph is recorded for backward.

    ``answer_rate`` overrides the masking probability inside the answer
    region (default: ``mlm_rate`` everywhere).
    """
    seqs, images, masks, mlm_parts = [], [], [], []
    if weights.alpha > 0:
        for inst in batch:
            seq = context_layout(inst, model, answer=model.tokens(inst.answer))
            rate = mlm_rate
            if answer_rate is not None:
                rate = np.full(len(seq), mlm_rate)
                lo, hi = seq.regions["answer"]
                rate[lo:hi] = answer_rate
            mb = apply_mlm_masking(seq.ids, seq.maskable, rate, rng, random_replace, len(model.vocab))
            seqs.append(seq.with_ids(mb.corrupted))
            images.append(inst.image)
            masks.append(build_seq2seq_mask(seq))
            mlm_parts.append(mb)
    n_mlm = len(seqs)
    if weights.beta > 0:
        for inst in batch:
            seq = context_layout(inst, model)
            seqs.append(seq)
            images.append(inst.image)
            masks.append(build_bidirectional_mask(seq))

    hidden = model.encode(seqs, images, masks, training=training, rng=rng)
    length = hidden.shape[1]
    lm_val = Tensor(0.0)
    if n_mlm:
        flat_pos = np.concatenate([b * length + mb.positions for b, mb in enumerate(mlm_parts)])
        if len(flat_pos):
            flat_ids = np.concatenate([np.pad(mb.original, (0, length - len(mb.original))) for mb in mlm_parts])
            merged = MlmBatch(flat_ids, flat_ids, flat_pos, np.ones(len(flat_ids), dtype=bool))
            hid = reshape(slice_(hidden, slice(0, n_mlm)), (n_mlm * length, model.config.hidden))
            lm_val = mlm_loss(hid, merged, model.tables.word, model.mlm_bias)
    nur_val = Tensor(0.0)
    if weights.beta > 0:
        cand_sets = [[inst.answer] + _pick_negatives(inst, batch, negatives, rng) for inst in batch]
        unique = sorted({c for cs in cand_sets for c in cs})
        vecs = dict(zip(unique, encode_candidates(unique, model, training=training, rng=rng)))
        losses = [_nur_from_vectors(slice_(hidden, (n_mlm + b, 0)), [vecs[c] for c in cs])
                  for b, cs in enumerate(cand_sets) if len(cs) >= 2]
        if losses:
            nur_val = scale(_sum(losses), 1.0 / len(losses))
    return total_loss(lm_val, nur_val, weights), lm_val, nur_val


def train_step(batch: Sequence[DialogInstance], model: VUBert, weights: LossWeights, state: AdamState,
               rng: np.random.Generator, mlm_rate: float = 0.15, negatives: int = 15,
               random_replace: bool = False, answer_rate: float | None = None) -> tuple[float, AdamState]:
    """One optimizer update on ``batch``; returns the pre-update loss."""
    model.zero_grad()
    loss, lm_val, nur_val = batch_loss(batch, model, weights, rng, mlm_rate, negatives, random_replace,
                                       answer_rate=answer_rate)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} (mlm={float(lm_val.data)}, nur={float(nur_val.data)})")
    loss.backward()
    params = model.named_params()
    adam_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, state)
    model.zero_grad()
    return value, state


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


# ---------------------------------------------------------------- ranking and generation

def rank_from_scores(scores) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def candidate_scores(instance: DialogInstance, model: VUBert, cache: CandidateCache | None = None) -> np.ndarray:
    with no_grad():
        h = encode_context(instance, model).h_cls.data
        if cache is not None:
            cache.populate(instance.candidates, model)
            mat = np.stack([cache.vectors[c] for c in instance.candidates])
        else:
            mat = np.stack([v.data for v in encode_candidates(instance.candidates, model)])
    return mat @ h


def rank_candidates(instance: DialogInstance, model: VUBert,
                    cache: CandidateCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``(permutation best-first, scores)`` with scores ``dot(h_cls, c_i)``."""
    scores = candidate_scores(instance, model, cache)
    return rank_from_scores(scores), scores


def _allowed_logits_mask(vocab_size: int) -> np.ndarray:
    blocked = np.zeros(vocab_size, dtype=bool)
    blocked[:len(RESERVED)] = True
    blocked[END] = False
    return blocked


def generate_answer(instance: DialogInstance, model: VUBert, max_len: int) -> list[int]:
    """Greedy left-to-right decoding by repeatedly predicting a trailing ``[MASK]``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    blocked = _allowed_logits_mask(len(model.vocab))
    out: list[int] = []
    with no_grad():
        for _ in range(max_len):
            seq = context_layout(instance, model, answer=out + [MASK])
            hidden = model.encode([seq], [instance.image], [build_seq2seq_mask(seq)])
            pos = seq.regions["answer"][0] + len(out)
            logits = model.mlm_logits(Tensor(hidden.data[0, pos])).data.copy()
            logits[blocked] = -np.inf
            tok = int(np.argmax(logits))
            if tok == END:
                break
            out.append(tok)
    return out


def generative_scores(instance: DialogInstance, model: VUBert) -> np.ndarray:
    """Sum of seq2seq log-probabilities of each candidate's tokens and closing ``[END]``."""
    seqs, images, masks, where = [], [], [], []
    for c, text in enumerate(instance.candidates):
        toks = model.tokens(text)
        targets = toks + [END]
        for t, target in enumerate(targets):
            seq = context_layout(instance, model, answer=toks[:t] + [MASK])
            seqs.append(seq)
            images.append(instance.image)
            masks.append(build_seq2seq_mask(seq))
            where.append((c, seq.regions["answer"][0] + t, target))
    scores = np.zeros(len(instance.candidates))
    with no_grad():
        hidden = model.encode(seqs, images, masks).data
        rows = np.stack([hidden[i, pos] for i, (_, pos, _) in enumerate(where)])
        logp = log_softmax(model.mlm_logits(Tensor(rows))).data
    for i, (c, _, target) in enumerate(where):
        scores[c] += logp[i, target]
    return scores
