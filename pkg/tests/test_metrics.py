import json
import math
from fractions import Fraction

import numpy as np
import pytest

from vubert.errors import ContractError, DataError
from vubert.metrics import (
    RankingResult, aggregate, evaluate_split, expected_random_mrr, format_report, gt_rank, mean_rank, mrr,
    ndcg, recall_at_k, report_record,
)


# ---------------------------------------------------------------- independent oracle
# Written from the metric definitions with plain Python loops, no shared helpers.

def oracle_rank(perm, gt):
    for pos in range(len(perm)):
        if perm[pos] == gt:
            return pos + 1
    raise AssertionError("gt missing")


def oracle_ndcg(perm, rel):
    k = 0
    for r in rel:
        if r > 0:
            k += 1
    if k == 0:
        return 1.0
    dcg = 0.0
    for i in range(k):
        dcg += rel[perm[i]] / math.log(i + 2, 2)
    ideal = sorted(rel, reverse=True)
    idcg = 0.0
    for i in range(k):
        idcg += ideal[i] / math.log(i + 2, 2)
    return dcg / idcg


def oracle_metrics(instances):
    ranks = [oracle_rank(p, g) for p, g, _ in instances]
    n = len(ranks)
    out = {f"r@{k}": sum(1 for r in ranks if r <= k) / n for k in (1, 5, 10)}
    out["mrr"] = sum(1.0 / r for r in ranks) / n
    out["mean_rank"] = sum(ranks) / n
    out["ndcg"] = sum(oracle_ndcg(p, rel) for p, _, rel in instances) / n
    return out


def random_instances(rng, n, n_cand=100):
    out = []
    for _ in range(n):
        perm = rng.permutation(n_cand)
        rel = np.where(rng.random(n_cand) < 0.1, rng.choice([0.2, 0.4, 0.5, 0.6, 0.8, 1.0], n_cand), 0.0)
        out.append((perm.tolist(), int(rng.integers(n_cand)), rel.tolist()))
    return out


# ---------------------------------------------------------------- examples

def R(perm, gt, rel=None):
    return RankingResult(np.asarray(perm), gt, None if rel is None else np.asarray(rel, dtype=float))


def test_gt_rank_examples():
    assert gt_rank(R([3, 0, 1, 2], 3)) == 1
    assert gt_rank(R(list(range(100)), 99)) == 100
    with pytest.raises(DataError):
        gt_rank(R([0, 1], 5))


def test_recall_examples():
    assert recall_at_k([R([0, 1], 0), R([1, 0], 1)], 1) == 1.0
    assert recall_at_k([R([9, 8, 7, 6, 5, 4], 5)], 5) == 1.0
    assert recall_at_k([R([9, 8, 7, 6, 5, 4], 5)], 4) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([R([0], 0)], 0)


def test_mrr_and_mean_rank_examples():
    assert mrr([R([0, 1], 0)] * 3) == 1.0
    assert mrr([R([1, 2, 3, 0], 0)]) == 0.25
    assert mean_rank([R([0, 1], 0)] * 2) == 1.0
    assert mean_rank([R([0, 1, 2], 0), R([1, 2, 0], 0)]) == 2.0
    for f in (mrr, mean_rank):
        with pytest.raises(ContractError):
            f([])


def test_ndcg_examples():
    rel = [0.2, 1.0, 0.0, 0.6]
    assert ndcg(R([1, 3, 0, 2], 1, rel)) == pytest.approx(1.0, abs=1e-15)
    assert ndcg(R([2, 0, 1], 0, [0.0, 0.0, 0.0])) == 1.0
    with pytest.raises(DataError):
        ndcg(R([0, 1, 2], 0, [1.0, 0.0]))


def test_hand_computed_ndcg():
    # rel [1.0, 0.5, 0, 0]; the 1.0 item lands second and the 0.5 item first
    value = ndcg(R([1, 0, 2, 3], 0, [1.0, 0.5, 0.0, 0.0]))
    assert abs(value - 0.8597) < 1e-4
    assert value == pytest.approx(oracle_ndcg([1, 0, 2, 3], [1.0, 0.5, 0.0, 0.0]), abs=1e-15)


def test_ndcg_ignores_order_beyond_k(rng):
    rel = np.zeros(10)
    rel[[2, 5]] = [1.0, 0.4]
    head = [5, 7]
    tails = [rng.permutation([i for i in range(10) if i not in head]).tolist() for _ in range(5)]
    values = {ndcg(R(head + t, 0, rel)) for t in tails}
    assert len(values) == 1


# ---------------------------------------------------------------- oracle agreement

def test_aggregate_matches_oracle_on_1000_instances():
    rng = np.random.default_rng(2024)
    raw = random_instances(rng, 1000)
    got = aggregate([R(p, g, rel) for p, g, rel in raw]).as_dict()
    want = oracle_metrics(raw)
    for key, value in want.items():
        assert abs(got[key] - value) <= 1e-12, key
    assert got["r@1"] <= got["r@5"] <= got["r@10"] <= 1.0
    assert got["count"] == 1000


def test_per_instance_rank_matches_linear_scan():
    rng = np.random.default_rng(7)
    for p, g, _ in random_instances(rng, 200, 30):
        assert gt_rank(R(p, g)) == oracle_rank(p, g)


def test_expected_random_mrr_closed_form():
    mu, sd = expected_random_mrr(100)
    harmonic = sum(Fraction(1, i) for i in range(1, 101))
    assert mu == pytest.approx(float(harmonic / 100), abs=1e-15)
    assert round(mu, 4) == 0.0519
    second = sum(Fraction(1, i * i) for i in range(1, 101)) / 100
    assert sd == pytest.approx(math.sqrt(float(second - (harmonic / 100) ** 2)), rel=1e-12)


# ---------------------------------------------------------------- evaluate_split with scorer callables

class _Inst:
    def __init__(self, n, gt, rel=None):
        self.candidates = [f"c{i}" for i in range(n)]
        self.gt_index = gt
        self.relevance = rel


def test_oracle_and_anti_oracle_scorers(rng):
    insts = []
    for _ in range(50):
        rel = np.where(rng.random(20) < 0.2, rng.random(20), 0.0)
        gt = int(rng.integers(20))
        rel[gt] = 1.0
        insts.append(_Inst(20, gt, rel))
    perfect = evaluate_split(lambda inst: inst.relevance + 1e-9 * (np.arange(20) == inst.gt_index), insts)
    assert perfect.ndcg == 1.0 and perfect.r_at[1] == 1.0 and perfect.mrr == 1.0
    worst = evaluate_split(lambda inst: -(np.arange(20) == inst.gt_index).astype(float), insts)
    assert worst.mean_rank == 20.0


def test_random_scorer_mrr_within_three_sigma():
    rng = np.random.default_rng(99)
    insts = [_Inst(100, int(rng.integers(100))) for _ in range(200)]
    m = evaluate_split(lambda inst: rng.random(100), insts)
    mu, sd = expected_random_mrr(100)
    assert abs(m.mrr - mu) <= 3 * sd / math.sqrt(200)
    assert m.ndcg is None


# ---------------------------------------------------------------- reports

def test_report_formats(rng):
    m = aggregate([R(rng.permutation(10), 3, rng.random(10)) for _ in range(7)])
    text = format_report(m, {"config_hash": "abc123", "split": "val"})
    lines = dict(line.split("=", 1) for line in text.strip().splitlines())
    assert lines["config_hash"] == "abc123" and float(lines["mrr"]) == m.mrr
    doc = json.loads(report_record(m, "abc123", "val"))
    assert doc["config_hash"] == "abc123" and doc["split"] == "val"
    assert doc["metrics"]["ndcg"] == m.ndcg and doc["metrics"]["r@5"] == m.r_at[5]
