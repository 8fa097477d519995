"""Pooled ranking metrics over (query, reference) pair lists.

micro-AP walks one list sorted by descending score and accumulates
precision at every true-positive rank, normalised by the number of true
pairs in the ground truth, so unretrieved positives and detections for
distractor queries both lower the score.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from core import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankedPairList:
    pairs: tuple

    def __post_init__(self):
        keys = [(p.query, p.reference) for p in self.pairs]
        if len(set(keys)) != len(keys):
            raise DomainError("ranked pair list contains duplicate (query, reference) keys")
        for a, b in zip(self.pairs, self.pairs[1:]):
            if _rank_key(a) > _rank_key(b):
                raise DomainError("ranked pair list is not sorted by descending score")

    @classmethod
    def from_scores(cls, pairs):
        """Sort by descending score; ties stable by (query, reference)."""
        return cls(tuple(sorted(pairs, key=_rank_key)))

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def to_frame(self):
        return pd.DataFrame(
            [(p.query, p.reference, p.score) for p in self.pairs],
            columns=["query_id", "reference_id", "score"],
        )


def _rank_key(p):
    return (-p.score, p.query, p.reference)


@dataclass(frozen=True)
class GroundTruth:
    positives: frozenset
    total_positives: int

    @classmethod
    def from_pairs(cls, pairs, total_positives=None):
        positives = frozenset((q, r) for q, r in pairs)
        total = len(positives) if total_positives is None else int(total_positives)
        if total < len(positives):
            raise DomainError(f"total_positives {total} is below the {len(positives)} listed positives")
        return cls(positives, total)


def _hits(ranked, gt):
    if gt.total_positives <= 0:
        raise DomainError("ground truth has no positives; metrics are undefined")
    return np.fromiter(((p.query, p.reference) in gt.positives for p in ranked), dtype=bool, count=len(ranked))


def micro_ap(ranked, gt):
    hits = _hits(ranked, gt)
    if not hits.any():
        return 0.0
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / gt.total_positives)


def recall_at_precision(ranked, gt, target=0.90):
    hits = _hits(ranked, gt)
    if len(hits) == 0:
        return 0.0
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, len(hits) + 1)
    qualifying = np.flatnonzero(precision >= target)
    if len(qualifying) == 0:
        return 0.0
    return float(cum[qualifying[-1]] / gt.total_positives)


def pr_curve(ranked, gt):
    """(recall, precision) after every rank."""
    hits = _hits(ranked, gt)
    cum = np.cumsum(hits)
    precision = cum / np.arange(1, len(hits) + 1)
    recall = cum / gt.total_positives
    return [(float(r), float(p)) for r, p in zip(recall, precision)]


def evaluate(pairs, gt_pairs, total_positives=None, target=0.90):
    ranked = RankedPairList.from_scores(pairs)
    gt = GroundTruth.from_pairs(gt_pairs, total_positives)
    result = {
        "uAP": micro_ap(ranked, gt),
        "R@P90": recall_at_precision(ranked, gt, target),
        "pairs": len(ranked),
        "positives": gt.total_positives,
    }
    logger.info("evaluated %d pairs against %d positives: uAP=%.6f", len(ranked), gt.total_positives, result["uAP"])
    return result


def dedupe_best(pairs):
    """Keep the highest score per (query, reference) key."""
    best = {}
    for p in pairs:
        key = (p.query, p.reference)
        if key not in best or p.score > best[key].score:
            best[key] = p
    return list(best.values())
