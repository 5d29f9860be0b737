"""Rank-quality metrics and comparative analyses.

Metric conventions follow the standard TREC tooling: queries whose
judgments contain no relevant document are excluded from aggregation;
judged queries missing from a run contribute zero to every mean;
precision@k always divides by k; nDCG uses linear gain (the grade) with
a 1/log2(rank+1) discount and an ideal ranking built from the full
judged grade multiset.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .records import Candidate


def _ranked_ids(candidates: Sequence[Candidate]) -> list[str]:
    return [c.doc_id for c in sorted(candidates, key=lambda c: c.rank)]


def _n_relevant(grades: Mapping[str, int]) -> int:
    return sum(1 for g in grades.values() if g > 0)


def average_precision(ranking: Sequence[str], grades: Mapping[str, int]) -> float:
    """Mean of precision at the rank of each relevant retrieved doc,
    divided by the total number of relevant judged docs."""
    total_relevant = _n_relevant(grades)
    if total_relevant == 0:
        return 0.0
    hits = 0
    precision_sum = 0.0
    for rank, doc_id in enumerate(ranking, start=1):
        if grades.get(doc_id, 0) > 0:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / total_relevant


def ndcg_at_k(ranking: Sequence[str], grades: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for rank, doc_id in enumerate(ranking[:k], start=1):
        gain = grades.get(doc_id, 0)
        if gain > 0:
            dcg += gain / math.log2(rank + 1)
    ideal = sorted((g for g in grades.values() if g > 0), reverse=True)
    idcg = sum(g / math.log2(rank + 1) for rank, g in enumerate(ideal[:k], start=1))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def precision_at_k(ranking: Sequence[str], grades: Mapping[str, int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    hits = sum(1 for doc_id in ranking[:k] if grades.get(doc_id, 0) > 0)
    return hits / k


def reciprocal_rank(ranking: Sequence[str], grades: Mapping[str, int]) -> float:
    for rank, doc_id in enumerate(ranking, start=1):
        if grades.get(doc_id, 0) > 0:
            return 1.0 / rank
    return 0.0


@dataclass(frozen=True)
class MetricReport:
    """Per-query metric values and their means over evaluated queries."""

    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    evaluated_queries: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "per_query": {m: dict(v) for m, v in self.per_query.items()},
            "evaluated_queries": list(self.evaluated_queries),
        }


def evaluate_run(
    run: Mapping[str, Sequence[Candidate]],
    qrels: Mapping[str, Mapping[str, int]],
    ndcg_k: int = 20,
    p_k: int = 20,
) -> MetricReport:
    """Score a run against judgments.

    Aggregates over every judged query that has at least one relevant
    document; judged queries absent from the run score zero on all
    metrics. Run queries without judgments are ignored.
    """
    metric_names = ("map", f"ndcg@{ndcg_k}", f"p@{p_k}", "mrr")
    per_query: dict[str, dict[str, float]] = {m: {} for m in metric_names}
    evaluated: list[str] = []
    for qid in sorted(qrels):
        grades = qrels[qid]
        if _n_relevant(grades) == 0:
            continue
        evaluated.append(qid)
        ranking = _ranked_ids(run.get(qid, ()))
        per_query["map"][qid] = average_precision(ranking, grades)
        per_query[f"ndcg@{ndcg_k}"][qid] = ndcg_at_k(ranking, grades, ndcg_k)
        per_query[f"p@{p_k}"][qid] = precision_at_k(ranking, grades, p_k)
        per_query["mrr"][qid] = reciprocal_rank(ranking, grades)
    means = {
        m: (sum(values.values()) / len(values) if values else 0.0)
        for m, values in per_query.items()
    }
    return MetricReport(per_query, means, tuple(evaluated))


# ---------------------------------------------------------------------------
# significance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    mean_difference: float
    n: int
    zero_variance: bool = False


def paired_t_test(a: Mapping[str, float], b: Mapping[str, float]) -> TTestResult:
    """Two-sided paired t-test on per-query metric values.

    Both inputs must cover the same queries. A zero-variance difference
    vector is flagged and reported with p = 1; its statistic is 0 for a
    zero mean and signed infinity otherwise.
    """
    if set(a) != set(b):
        raise ValueError("paired t-test requires identical query sets")
    if len(a) < 2:
        raise ValueError("paired t-test requires at least two queries")
    keys = sorted(a)
    diffs = np.array([a[q] - b[q] for q in keys])
    n = len(diffs)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return TTestResult(t, 1.0, mean, n, zero_variance=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(special.stdtr(n - 1, -abs(t)))
    return TTestResult(t, p, mean, n, zero_variance=False)


# ---------------------------------------------------------------------------
# difficulty bins
# ---------------------------------------------------------------------------

DEFAULT_BIN_EDGES = (5, 25, 50, 75, 95, 100)


@dataclass(frozen=True)
class DifficultyBin:
    label: str
    query_ids: tuple[str, ...]
    baseline_mean: float
    treatment_mean: float | None
    delta: float | None


def difficulty_bins(
    baseline: Mapping[str, float],
    treatment: Mapping[str, float] | None = None,
    edges: Sequence[int] = DEFAULT_BIN_EDGES,
) -> list[DifficultyBin]:
    """Partition queries into percentile bins of a baseline metric.

    Queries sort ascending by baseline value (ties by query id), so the
    first bin holds the hardest queries. Bin i covers sorted indices
    [floor(n*edges[i-1]/100), floor(n*edges[i]/100)). When treatment
    values are given, bins report the per-bin mean difference.
    """
    edges = tuple(edges)
    if not edges or list(edges) != sorted(set(edges)) or edges[-1] != 100:
        raise ValueError("edges must be strictly increasing and end at 100")
    if any(e < 1 or e > 100 for e in edges):
        raise ValueError("edges must lie in 1..100")
    if treatment is not None and set(treatment) != set(baseline):
        raise ValueError("treatment must cover the same queries as baseline")
    order = sorted(baseline, key=lambda q: (baseline[q], q))
    n = len(order)
    bins: list[DifficultyBin] = []
    lo_pct = 0
    start = 0
    for pct in edges:
        end = (n * pct) // 100
        qids = tuple(order[start:end])
        if qids:
            base_mean = sum(baseline[q] for q in qids) / len(qids)
            if treatment is not None:
                treat_mean = sum(treatment[q] for q in qids) / len(qids)
                delta = treat_mean - base_mean
            else:
                treat_mean = delta = None
        else:
            base_mean, treat_mean, delta = 0.0, None, None
        bins.append(DifficultyBin(f"{lo_pct}-{pct}", qids, base_mean, treat_mean, delta))
        lo_pct = pct
        start = end
    return bins


# ---------------------------------------------------------------------------
# rank movement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradeShift:
    grade: int
    n: int
    mean_rank_before: float
    mean_rank_after: float
    n_top10_after: int
    n_top50_after: int
    n_beyond100_after: int


@dataclass(frozen=True)
class RankShiftReport:
    by_grade: dict[int, GradeShift] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            str(g): {
                "n": s.n,
                "mean_rank_before": s.mean_rank_before,
                "mean_rank_after": s.mean_rank_after,
                "n_top10_after": s.n_top10_after,
                "n_top50_after": s.n_top50_after,
                "n_beyond100_after": s.n_beyond100_after,
            }
            for g, s in sorted(self.by_grade.items())
        }


def rank_shift_report(
    before: Mapping[str, Sequence[Candidate]],
    after: Mapping[str, Sequence[Candidate]],
    qrels: Mapping[str, Mapping[str, int]],
) -> RankShiftReport:
    """How judged documents move between two runs, grouped by grade.

    A judged document absent from a query's ranking counts at rank
    len(candidates)+1 for that query. Counts are cumulative on the
    after-rank: within top 10, within top 50, and beyond rank 100.
    """
    per_grade: dict[int, list[tuple[int, int]]] = {}
    for qid in sorted(qrels):
        ranks_before = {c.doc_id: c.rank for c in before.get(qid, ())}
        ranks_after = {c.doc_id: c.rank for c in after.get(qid, ())}
        sentinel_before = len(ranks_before) + 1
        sentinel_after = len(ranks_after) + 1
        for doc_id, grade in qrels[qid].items():
            rb = ranks_before.get(doc_id, sentinel_before)
            ra = ranks_after.get(doc_id, sentinel_after)
            per_grade.setdefault(grade, []).append((rb, ra))
    by_grade = {}
    for grade, pairs in per_grade.items():
        n = len(pairs)
        by_grade[grade] = GradeShift(
            grade=grade,
            n=n,
            mean_rank_before=sum(rb for rb, _ in pairs) / n,
            mean_rank_after=sum(ra for _, ra in pairs) / n,
            n_top10_after=sum(1 for _, ra in pairs if ra <= 10),
            n_top50_after=sum(1 for _, ra in pairs if ra <= 50),
            n_beyond100_after=sum(1 for _, ra in pairs if ra > 100),
        )
    return RankShiftReport(by_grade)
