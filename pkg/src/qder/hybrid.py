"""Score fusion between two runs over the same queries.

Scores are min-max normalized per query (a constant list maps to 0.5),
then combined as lam * a + (1 - lam) * b over the union of each query's
documents; a document missing from one run contributes zero on that
side. The mixing weight can be fixed, fit on a grid against judgments,
or fit per cross-validation fold on that fold's training queries.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .evaluation import average_precision

Rankings = dict[str, list[tuple[str, float]]]


def normalize_per_query(rankings: Mapping[str, Sequence[tuple[str, float]]]) -> Rankings:
    """Min-max normalize scores within each query to [0, 1].

    A query whose scores are all equal gets 0.5 everywhere, keeping the
    run usable in a fusion without dividing by zero.
    """
    out: Rankings = {}
    for qid, ranking in rankings.items():
        scores = [s for _, s in ranking]
        lo, hi = min(scores, default=0.0), max(scores, default=0.0)
        if hi == lo:
            out[qid] = [(doc_id, 0.5) for doc_id, _ in ranking]
        else:
            span = hi - lo
            out[qid] = [(doc_id, (s - lo) / span) for doc_id, s in ranking]
    return out


def interpolate(
    a: Mapping[str, Sequence[tuple[str, float]]],
    b: Mapping[str, Sequence[tuple[str, float]]],
    lam: float,
) -> Rankings:
    """Combine two runs as lam * a + (1 - lam) * b per document.

    Both runs must cover the same queries; the fused list covers the
    union of each query's documents and is sorted by fused score
    descending (ties by doc id).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if set(a) != set(b):
        raise ValueError("fusion requires runs over the same query set")
    fused: Rankings = {}
    for qid in a:
        scores_a = dict(a[qid])
        scores_b = dict(b[qid])
        combined = {
            doc_id: lam * scores_a.get(doc_id, 0.0) + (1.0 - lam) * scores_b.get(doc_id, 0.0)
            for doc_id in scores_a.keys() | scores_b.keys()
        }
        fused[qid] = sorted(combined.items(), key=lambda kv: (-kv[1], kv[0]))
    return fused


def _map_of(rankings: Rankings, qrels: Mapping[str, Mapping[str, int]]) -> float:
    values = []
    for qid, ranking in rankings.items():
        grades = qrels.get(qid, {})
        if not any(g > 0 for g in grades.values()):
            continue
        values.append(average_precision([doc_id for doc_id, _ in ranking], grades))
    return sum(values) / len(values) if values else 0.0


@dataclass(frozen=True)
class LambdaFit:
    lam: float
    map_score: float
    grid: tuple[tuple[float, float], ...]


def fit_lambda(
    a: Mapping[str, Sequence[tuple[str, float]]],
    b: Mapping[str, Sequence[tuple[str, float]]],
    qrels: Mapping[str, Mapping[str, int]],
    step: float = 0.05,
) -> LambdaFit:
    """Grid-search the mixing weight that maximizes MAP.

    Both runs are normalized per query first. The grid is 0, step,
    2*step, ... with 1.0 always included; ties go to the smallest
    weight.
    """
    if not 0.0 < step <= 1.0:
        raise ValueError("step must lie in (0, 1]")
    norm_a = normalize_per_query(a)
    norm_b = normalize_per_query(b)
    grid_points = []
    lam = 0.0
    while lam < 1.0 - 1e-12:
        grid_points.append(round(lam, 10))
        lam += step
    grid_points.append(1.0)
    results = []
    best_lam, best_map = grid_points[0], -1.0
    for lam in grid_points:
        score = _map_of(interpolate(norm_a, norm_b, lam), qrels)
        results.append((lam, score))
        if score > best_map:
            best_lam, best_map = lam, score
    return LambdaFit(best_lam, best_map, tuple(results))


@dataclass(frozen=True)
class CvLambdaFit:
    rankings: Rankings
    lambda_by_fold: dict[int, float]
    map_score: float


def fit_lambda_cv(
    a: Mapping[str, Sequence[tuple[str, float]]],
    b: Mapping[str, Sequence[tuple[str, float]]],
    qrels: Mapping[str, Mapping[str, int]],
    fold_of: Mapping[str, int],
    step: float = 0.05,
) -> CvLambdaFit:
    """Per-fold fusion: fit the weight on every query outside a fold,
    apply it to the fold's own queries, and stitch the fused rankings
    back together.

    ``fold_of`` assigns each query to the fold that held it out, as
    produced by cross-validated training.
    """
    if set(a) != set(b):
        raise ValueError("fusion requires runs over the same query set")
    missing = [qid for qid in a if qid not in fold_of]
    if missing:
        raise ValueError(f"queries missing a fold assignment: {sorted(missing)[:5]}")
    norm_a = normalize_per_query(a)
    norm_b = normalize_per_query(b)
    fused: Rankings = {}
    lambdas: dict[int, float] = {}
    for fold in sorted(set(fold_of[qid] for qid in a)):
        test_ids = [qid for qid in a if fold_of[qid] == fold]
        train_ids = [qid for qid in a if fold_of[qid] != fold]
        fit = fit_lambda(
            {qid: a[qid] for qid in train_ids},
            {qid: b[qid] for qid in train_ids},
            qrels,
            step,
        )
        lambdas[fold] = fit.lam
        part = interpolate(
            {qid: norm_a[qid] for qid in test_ids},
            {qid: norm_b[qid] for qid in test_ids},
            fit.lam,
        )
        fused.update(part)
    return CvLambdaFit(fused, lambdas, _map_of(fused, qrels))
