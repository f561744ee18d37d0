"""Ranking metrics: Recall@K, MRR, mean rank and NDCG over dense relevance.

NDCG follows the VisDial convention: with ``k`` the number of candidates of
positive relevance, ``DCG = sum_{i<=k} rel(perm_i) / log2(i + 1)`` and IDCG is
the same sum over relevances sorted in descending order. Instances with no
relevant candidate score 1 and still count toward the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from vubert.errors import ContractError, DataError

RECALL_KS = (1, 5, 10)


@dataclass
class RankingResult:
    permutation: np.ndarray  # candidate indices, best first
    gt_index: int
    relevance: np.ndarray | None = None

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)


@dataclass
class RankMetrics:
    r_at: dict[int, float]
    mrr: float
    mean_rank: float
    ndcg: float | None = None
    count: int = 0
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {f"r@{k}": v for k, v in sorted(self.r_at.items())}
        out.update(mrr=self.mrr, mean_rank=self.mean_rank, count=self.count)
        if self.ndcg is not None:
            out["ndcg"] = self.ndcg
        out.update(self.extra)
        return out


def gt_rank(result: RankingResult) -> int:
    hits = np.flatnonzero(result.permutation == result.gt_index)
    if len(hits) == 0:
        raise DataError(f"ground-truth index {result.gt_index} not in the permutation")
    return int(hits[0]) + 1


def recall_at_k(results: Sequence[RankingResult], k: int) -> float:
    if k < 1:
        raise ValueError("K must be >= 1")
    if not results:
        raise ContractError("recall over zero results")
    return float(np.mean([gt_rank(r) <= k for r in results]))


def mrr(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ContractError("MRR over zero results")
    return float(np.mean([1.0 / gt_rank(r) for r in results]))


def mean_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ContractError("mean rank over zero results")
    return float(np.mean([gt_rank(r) for r in results]))


def ndcg(result: RankingResult) -> float:
    rel = result.relevance
    if rel is None:
        raise ContractError("NDCG needs a relevance vector")
    rel = np.asarray(rel, dtype=np.float64)
    if len(rel) != len(result.permutation):
        raise DataError(f"{len(rel)} relevance scores for {len(result.permutation)} candidates")
    k = int((rel > 0).sum())
    if k == 0:
        return 1.0
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((rel[result.permutation[:k]] * discount).sum())
    idcg = float((np.sort(rel)[::-1][:k] * discount).sum())
    return dcg / idcg


def aggregate(results: Sequence[RankingResult], ks: Sequence[int] = RECALL_KS) -> RankMetrics:
    if not results:
        raise ContractError("cannot aggregate zero results")
    with_rel = [r for r in results if r.relevance is not None]
    return RankMetrics(
        r_at={k: recall_at_k(results, k) for k in ks},
        mrr=mrr(results),
        mean_rank=mean_rank(results),
        ndcg=float(np.mean([ndcg(r) for r in with_rel])) if with_rel else None,
        count=len(results),
    )


def evaluate_split(model, instances: Sequence, cache=None, mode: str = "discriminative") -> RankMetrics:
    """Rank every instance's candidates and aggregate.

    ``model`` is either a :class:`vubert.model.VUBert` or any callable mapping
    an instance to one score per candidate (higher is better).
    """
    return aggregate(rank_split(model, instances, cache, mode))


def rank_split(model, instances: Sequence, cache=None, mode: str = "discriminative") -> list[RankingResult]:
    from vubert.objectives import candidate_scores, generative_scores, rank_from_scores

    if callable(model) and not hasattr(model, "named_params"):
        scorer: Callable = model
    elif mode == "generative":
        scorer = lambda inst: generative_scores(inst, model)  # noqa: E731
    elif mode == "discriminative":
        scorer = lambda inst: candidate_scores(inst, model, cache)  # noqa: E731
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    results = []
    for inst in instances:
        scores = scorer(inst)
        results.append(RankingResult(rank_from_scores(scores), inst.gt_index, inst.relevance))
    return results


def format_report(metrics: RankMetrics, header: dict | None = None) -> str:
    """Line-oriented ``key=value`` text; floats at full precision."""
    lines = [f"{k}={v}" for k, v in (header or {}).items()]
    for k, v in metrics.as_dict().items():
        lines.append(f"{k}={float(v)!r}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + "\n"


def report_record(metrics: RankMetrics, config_hash: str, split: str, **extra) -> str:
    """One JSON document per run."""
    doc = {"config_hash": config_hash, "split": split, "metrics": metrics.as_dict(), **extra}
    return json.dumps(doc, sort_keys=True)


def expected_random_mrr(n_candidates: int) -> tuple[float, float]:
    """Mean and standard deviation of ``1/rank`` when the rank is uniform on ``1..n``."""
    inv = 1.0 / np.arange(1, n_candidates + 1)
    mu = float(inv.mean())
    return mu, math.sqrt(float((inv ** 2).mean()) - mu * mu)
