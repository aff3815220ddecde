"""Ranking evaluation: accuracy metrics and group/long-tail fairness.

Each eligible user's held-out positive is ranked against their fixed
99-item negative sample (100 candidates total, positive first). Ranks are
1-based; score ties resolve by candidate list position. Aggregates use
plain left-to-right accumulation so results are bit-stable and match
brute-force re-implementations exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    GROUP_OVER,
    GROUP_UNDER,
    N_DECILES,
    Dataset,
    Split,
    long_tail_items,
    popularity_deciles,
)
from .model import FilterSpec, ModelParams, batch_scores

TOP_SLOTS = 10


@dataclass
class RankRecord:
    """Outcome of ranking one user's positive among its candidates."""

    user_index: int
    positive_item: int
    rank: int
    top10: list[int]


@dataclass
class EvalReport:
    """Accuracy and fairness metrics over one evaluation stage.

    Group means are None when no record's positive belongs to the group;
    rank_gap is mean_rank_under - mean_rank_over (None if either side is).
    """

    hit_ratio_10: float
    ndcg_10: float
    mean_rank_under: float | None
    mean_rank_over: float | None
    rank_gap: float | None
    lt_visibility: float
    lt_mean_rank: float | None
    per_decile_mean_rank: list[float | None]

    def to_dict(self) -> dict:
        return {
            "hit_ratio_10": self.hit_ratio_10,
            "ndcg_10": self.ndcg_10,
            "mean_rank_under": self.mean_rank_under,
            "mean_rank_over": self.mean_rank_over,
            "rank_gap": self.rank_gap,
            "lt_visibility": self.lt_visibility,
            "lt_mean_rank": self.lt_mean_rank,
            "per_decile_mean_rank": self.per_decile_mean_rank,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def rank_candidates(scores: np.ndarray) -> tuple[int, np.ndarray]:
    """1-based rank of candidate 0 under descending scores, plus the order.

    Ties resolve by candidate list position, so the result depends only on
    the ordering of the scores, never on their magnitudes.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    rank = int(np.nonzero(order == 0)[0][0]) + 1
    return rank, order


def rank_all(
    params: ModelParams,
    filter: FilterSpec,
    split: Split,
    stage: str,
) -> list[RankRecord]:
    """Rank every eligible user's held-out positive for the given stage."""
    if stage not in ("validation", "test"):
        raise ValueError(f"stage must be 'validation' or 'test', got {stage!r}")
    held_out = split.validation if stage == "validation" else split.test
    negatives = split.eval_negatives[stage]
    records: list[RankRecord] = []
    for user, positive, _ in held_out.tolist():
        candidates = np.concatenate(([positive], negatives[user]))
        scores = batch_scores(user, candidates, params, filter)
        rank, order = rank_candidates(scores)
        top10 = candidates[order[:TOP_SLOTS]].tolist()
        records.append(RankRecord(user, positive, rank, top10))
    return records


def hit_ratio(records: list[RankRecord], cutoff: int = 10) -> float:
    """Fraction of records whose positive ranked within the cutoff."""
    if not records:
        raise ValueError("no records to evaluate")
    return sum(1 for r in records if r.rank <= cutoff) / len(records)


def ndcg(records: list[RankRecord], cutoff: int = 10) -> float:
    """Mean 1/log2(rank + 1) of positives within the cutoff, else 0.

    Single-relevant-item NDCG: the ideal DCG is 1.
    """
    if not records:
        raise ValueError("no records to evaluate")
    gain = 0.0
    for r in records:
        if r.rank <= cutoff:
            gain += 1.0 / math.log2(r.rank + 1)
    return gain / len(records)


def _mean(ranks: list[int]) -> float | None:
    if not ranks:
        return None
    return sum(ranks) / len(ranks)


def group_mean_ranks(
    records: list[RankRecord], dataset: Dataset
) -> tuple[float | None, float | None, list[float | None]]:
    """Mean positive rank for the under/over groups and per decile.

    Neutral items do not enter the group means. A group or decile with no
    records yields None rather than 0. The decile list always has 10 slots
    (trailing Nones when the dataset has fewer bins).
    """
    deciles = popularity_deciles(dataset)
    under: list[int] = []
    over: list[int] = []
    per_decile: list[list[int]] = [[] for _ in range(N_DECILES)]
    for r in records:
        group = dataset.item_group[r.positive_item]
        if group == GROUP_UNDER:
            under.append(r.rank)
        elif group == GROUP_OVER:
            over.append(r.rank)
        per_decile[int(deciles[r.positive_item])].append(r.rank)
    return _mean(under), _mean(over), [_mean(ranks) for ranks in per_decile]


def long_tail_metrics(
    records: list[RankRecord], dataset: Dataset
) -> tuple[float, float | None]:
    """Long-tail share of top-10 slots and mean rank of long-tail positives.

    Visibility counts every top-10 slot across all records (repeats
    included) occupied by a bottom-decile item, over 10 slots per record.
    """
    if not records:
        raise ValueError("no records to evaluate")
    tail = long_tail_items(dataset)
    slots = 0
    tail_ranks: list[int] = []
    for r in records:
        slots += sum(1 for item in r.top10 if tail[item])
        if tail[r.positive_item]:
            tail_ranks.append(r.rank)
    visibility = slots / (TOP_SLOTS * len(records))
    return visibility, _mean(tail_ranks)


def evaluate(
    params: ModelParams,
    filter: FilterSpec,
    split: Split,
    dataset: Dataset,
    stage: str,
) -> tuple[EvalReport, list[RankRecord]]:
    """Full report for one stage, plus the per-user records behind it."""
    records = rank_all(params, filter, split, stage)
    mean_under, mean_over, per_decile = group_mean_ranks(records, dataset)
    lt_visibility, lt_mean_rank = long_tail_metrics(records, dataset)
    gap = None
    if mean_under is not None and mean_over is not None:
        gap = mean_under - mean_over
    report = EvalReport(
        hit_ratio_10=hit_ratio(records),
        ndcg_10=ndcg(records),
        mean_rank_under=mean_under,
        mean_rank_over=mean_over,
        rank_gap=gap,
        lt_visibility=lt_visibility,
        lt_mean_rank=lt_mean_rank,
        per_decile_mean_rank=per_decile,
    )
    return report, records


REPORT_CSV_FIELDS = [
    "hit_ratio_10",
    "ndcg_10",
    "mean_rank_under",
    "mean_rank_over",
    "rank_gap",
    "lt_visibility",
    "lt_mean_rank",
]


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    """One-row CSV of the scalar report fields (None -> empty cell)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_FIELDS)
        row = [getattr(report, f) for f in REPORT_CSV_FIELDS]
        writer.writerow(["" if v is None else repr(v) for v in row])


def write_records_csv(records: list[RankRecord], path: str | Path) -> None:
    """Per-user dump: user, positive, rank, top10 pipe-joined."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_index", "positive_item", "rank", "top10"])
        for r in records:
            writer.writerow(
                [r.user_index, r.positive_item, r.rank,
                 "|".join(str(i) for i in r.top10)]
            )
