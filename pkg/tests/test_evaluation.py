import numpy as np
import pytest

from core import DomainError, PairScore
from evaluation import (
    GroundTruth,
    RankedPairList,
    dedupe_best,
    evaluate,
    micro_ap,
    pr_curve,
    recall_at_precision,
)


def _ranked(hits):
    """A ranked list whose i-th pair is a true positive iff hits[i]."""
    n = len(hits)
    pairs = [PairScore(f"Q{i:05d}", "R1" if h else "R0", float(n - i)) for i, h in enumerate(hits)]
    return RankedPairList.from_scores(pairs)


def _gt(ranked, hits, total=None):
    positives = [(p.query, p.reference) for p, h in zip(ranked, hits) if h]
    return GroundTruth.from_pairs(positives, total)


def naive_micro_ap(hits, total):
    acc = 0.0
    for r in range(1, len(hits) + 1):
        if hits[r - 1]:
            acc += sum(hits[:r]) / r
    return acc / total


class TestMicroAp:
    def test_worked_fixture(self):
        hits = [True, False, True]
        ranked = _ranked(hits)
        assert round(micro_ap(ranked, _gt(ranked, hits)), 6) == round(5 / 6, 6)

    def test_unretrieved_positive(self):
        hits = [True, False, True]
        ranked = _ranked(hits)
        assert round(micro_ap(ranked, _gt(ranked, hits, total=3)), 6) == round(5 / 9, 6)

    def test_perfect_ranking(self):
        hits = [True] * 4 + [False] * 3
        ranked = _ranked(hits)
        assert micro_ap(ranked, _gt(ranked, hits)) == 1.0

    def test_no_positives_raises(self):
        ranked = _ranked([False])
        with pytest.raises(DomainError):
            micro_ap(ranked, GroundTruth.from_pairs([]))

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 300))
            hits = list(rng.random(n) < rng.uniform(0.05, 0.9))
            if not any(hits):
                hits[0] = True
            ranked = _ranked(hits)
            total = sum(hits) + int(rng.integers(0, 5))
            assert micro_ap(ranked, _gt(ranked, hits, total)) == pytest.approx(naive_micro_ap(hits, total), abs=1e-9)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        pairs = [PairScore(f"Q{i}", f"R{i % 7}", float(s)) for i, s in enumerate(rng.uniform(0.1, 1.0, 200))]
        gt = GroundTruth.from_pairs([(p.query, p.reference) for p in pairs[::3]])
        warped = [PairScore(p.query, p.reference, float(np.exp(3 * p.score))) for p in pairs]
        assert micro_ap(RankedPairList.from_scores(pairs), gt) == micro_ap(RankedPairList.from_scores(warped), gt)

    def test_removing_false_positive_never_hurts(self):
        hits = [True, False, True, False, True]
        ranked = _ranked(hits)
        gt = _gt(ranked, hits)
        trimmed = RankedPairList(tuple(p for p in ranked.pairs if p.query != "Q00001"))
        assert micro_ap(trimmed, gt) >= micro_ap(ranked, gt)

    def test_trailing_false_positives_change_nothing(self):
        hits = [True, False, True]
        ranked = _ranked(hits)
        gt = _gt(ranked, hits)
        extended = RankedPairList(ranked.pairs + (PairScore("QX1", "R0", -5.0), PairScore("QX2", "R0", -6.0)))
        assert micro_ap(extended, gt) == micro_ap(ranked, gt)


class TestRecallAtPrecision:
    def test_nine_hits_then_miss(self):
        hits = [True] * 9 + [False]
        ranked = _ranked(hits)
        assert recall_at_precision(ranked, _gt(ranked, hits, 9)) == 1.0

    def test_no_qualifying_prefix(self):
        hits = [False, True, False, True]
        ranked = _ranked(hits)
        assert recall_at_precision(ranked, _gt(ranked, hits)) == 0.0

    def test_empty_list(self):
        assert recall_at_precision(RankedPairList(()), GroundTruth.from_pairs([("Q1", "R1")])) == 0.0

    def test_nonincreasing_in_target(self):
        rng = np.random.default_rng(11)
        hits = list(rng.random(200) < 0.6)
        ranked = _ranked(hits)
        gt = _gt(ranked, hits)
        values = [recall_at_precision(ranked, gt, t) for t in np.linspace(0.1, 1.0, 19)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestPrCurve:
    def test_single_hit(self):
        ranked = _ranked([True])
        assert pr_curve(ranked, _gt(ranked, [True])) == [(1.0, 1.0)]

    def test_single_miss(self):
        ranked = _ranked([False])
        assert pr_curve(ranked, GroundTruth.from_pairs([("Q9", "R9")])) == [(0.0, 0.0)]

    def test_matches_prefix_recount(self):
        rng = np.random.default_rng(5)
        hits = list(rng.random(150) < 0.4)
        hits[0] = True
        ranked = _ranked(hits)
        gt = _gt(ranked, hits)
        curve = pr_curve(ranked, gt)
        for r, (recall, precision) in enumerate(curve, start=1):
            found = sum(hits[:r])
            assert recall == pytest.approx(found / gt.total_positives)
            assert precision == pytest.approx(found / r)
        recalls = [r for r, _ in curve]
        assert recalls == sorted(recalls)


class TestRankedPairList:
    def test_ties_broken_by_ids(self):
        ranked = RankedPairList.from_scores([PairScore("Q2", "R1", 0.5), PairScore("Q1", "R2", 0.5),
                                             PairScore("Q1", "R1", 0.5)])
        assert [(p.query, p.reference) for p in ranked] == [("Q1", "R1"), ("Q1", "R2"), ("Q2", "R1")]

    def test_duplicates_rejected(self):
        with pytest.raises(DomainError):
            RankedPairList.from_scores([PairScore("Q1", "R1", 0.5), PairScore("Q1", "R1", 0.4)])

    def test_unsorted_rejected(self):
        with pytest.raises(DomainError):
            RankedPairList((PairScore("Q1", "R1", 0.1), PairScore("Q2", "R1", 0.9)))

    def test_dedupe_keeps_best(self):
        kept = dedupe_best([PairScore("Q1", "R1", 0.5), PairScore("Q1", "R1", 0.7)])
        assert kept == [PairScore("Q1", "R1", 0.7)]


def test_evaluate_summary():
    pairs = [PairScore("Q1", "R1", 0.9), PairScore("Q2", "R5", 0.8), PairScore("Q3", "R3", 0.7)]
    result = evaluate(pairs, [("Q1", "R1"), ("Q3", "R3")])
    assert result["uAP"] == pytest.approx(5 / 6)
    assert result["pairs"] == 3
    assert result["positives"] == 2
