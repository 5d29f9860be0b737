"""Model-behavior analyses: correlations, clustering, noise, ablations.

These routines answer "why does it work" questions: how much the
interaction ops agree with each other, how separable the learned
feature space is compared to raw pooled embeddings, how scores and
rankings react to input perturbations, and what each architectural
piece contributes.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .interaction import (
    AblationConfig,
    CANONICAL_OPS,
    Model,
    build_features,
    init_model,
    score_features,
)
from .records import DocumentRecord, EntitySet, QueryRecord, TokenMatrix
from .trainer import Dataset, TrainConfig, cross_validate
from .evaluation import average_precision


# ---------------------------------------------------------------------------
# rank correlations
# ---------------------------------------------------------------------------


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    n = len(values)
    sorted_values = values[order]
    while i < n:
        j = i
        while j + 1 < n and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    rx = _fractional_ranks(x)
    ry = _fractional_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        raise ValueError("correlation is undefined for a constant input")
    return float(rx @ ry) / denom


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float:
    """Kendall tau-b via scipy; errors on an all-tied input."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D sequences of equal length")
    if len(x) < 2:
        raise ValueError("need at least two observations")
    result = stats.kendalltau(x, y)
    tau = float(getattr(result, "statistic", result[0]))
    if math.isnan(tau):
        raise ValueError("correlation is undefined for a constant input")
    return tau


# ---------------------------------------------------------------------------
# clustering quality
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterReport:
    davies_bouldin: float
    silhouette: float
    calinski_harabasz: float
    n_points: int
    n_clusters: int

    def to_dict(self) -> dict:
        return {
            "davies_bouldin": self.davies_bouldin,
            "silhouette": self.silhouette,
            "calinski_harabasz": self.calinski_harabasz,
            "n_points": self.n_points,
            "n_clusters": self.n_clusters,
        }


def _group_indices(labels: Sequence) -> dict:
    groups: dict = {}
    for i, label in enumerate(labels):
        groups.setdefault(label, []).append(i)
    return groups


def davies_bouldin(points: np.ndarray, labels: Sequence) -> float:
    """Mean over clusters of the worst scatter-to-separation ratio.

    Scatter is the mean Euclidean distance of members to their
    centroid; separation is the distance between centroids.
    """
    points = np.asarray(points, dtype=np.float64)
    groups = _group_indices(labels)
    if len(groups) < 2:
        raise ValueError("need at least two clusters")
    keys = sorted(groups, key=str)
    centroids = np.stack([points[groups[k]].mean(axis=0) for k in keys])
    scatter = np.array(
        [
            float(np.linalg.norm(points[groups[k]] - centroids[i], axis=1).mean())
            for i, k in enumerate(keys)
        ]
    )
    k = len(keys)
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            gap = float(np.linalg.norm(centroids[i] - centroids[j]))
            if gap == 0.0:
                raise ValueError("coincident centroids make the index undefined")
            worst[i] = max(worst[i], (scatter[i] + scatter[j]) / gap)
    return float(worst.mean())


def silhouette_mean(points: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette over all points; singleton clusters score 0."""
    points = np.asarray(points, dtype=np.float64)
    groups = _group_indices(labels)
    if len(groups) < 2:
        raise ValueError("need at least two clusters")
    n = len(points)
    diffs = points[:, None, :] - points[None, :, :]
    distances = np.linalg.norm(diffs, axis=2)
    label_list = list(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = [j for j in groups[label_list[i]] if j != i]
        if not own:
            scores[i] = 0.0
            continue
        a = distances[i, own].mean()
        b = min(
            distances[i, members].mean()
            for key, members in groups.items()
            if key != label_list[i]
        )
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def calinski_harabasz(points: np.ndarray, labels: Sequence) -> float:
    """Between-cluster over within-cluster dispersion, df-normalized."""
    points = np.asarray(points, dtype=np.float64)
    groups = _group_indices(labels)
    k = len(groups)
    n = len(points)
    if k < 2:
        raise ValueError("need at least two clusters")
    if n <= k:
        raise ValueError("need more points than clusters")
    grand = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for members in groups.values():
        cluster = points[members]
        centroid = cluster.mean(axis=0)
        between += len(members) * float(np.sum((centroid - grand) ** 2))
        within += float(np.sum((cluster - centroid) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def clustering_metrics(points: np.ndarray, labels: Sequence) -> ClusterReport:
    points = np.asarray(points, dtype=np.float64)
    groups = _group_indices(labels)
    return ClusterReport(
        davies_bouldin=davies_bouldin(points, labels),
        silhouette=silhouette_mean(points, labels),
        calinski_harabasz=calinski_harabasz(points, labels),
        n_points=len(points),
        n_clusters=len(groups),
    )


# ---------------------------------------------------------------------------
# noise sensitivity
# ---------------------------------------------------------------------------

DEFAULT_SIGMAS = (0.001, 0.005, 0.01, 0.05, 0.1)


@dataclass(frozen=True)
class NoiseInstanceSpec:
    """Shape of the random instances probed by the noise harness."""

    l_q: int = 8
    l_d: int = 16
    d_t: int = 16
    n_query_entities: int = 4
    n_doc_entities: int = 6
    d_e: int = 8
    n_candidates: int = 100


@dataclass(frozen=True)
class NoiseLevelStats:
    sigma: float
    mean_angle_deg: float
    mean_amplification: float
    mean_rank_tau: float
    n_trials: int
    n_skipped: int


@dataclass(frozen=True)
class NoiseReport:
    levels: tuple[NoiseLevelStats, ...]

    def to_dict(self) -> dict:
        return {
            "levels": [
                {
                    "sigma": s.sigma,
                    "mean_angle_deg": s.mean_angle_deg,
                    "mean_amplification": s.mean_amplification,
                    "mean_rank_tau": s.mean_rank_tau,
                    "n_trials": s.n_trials,
                    "n_skipped": s.n_skipped,
                }
                for s in self.levels
            ]
        }


def _angle_degrees(a: np.ndarray, b: np.ndarray) -> float | None:
    if np.array_equal(a, b):
        return 0.0
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return None
    cosine = float(a @ b) / (na * nb)
    return math.degrees(math.acos(min(1.0, max(-1.0, cosine))))


class _NoiseTrial:
    """One random instance plus a unit noise draw, reused across levels.

    Scaling a single noise draw by sigma pairs the levels, so the
    per-trial deviation curves are directly comparable.
    """

    def __init__(self, spec: NoiseInstanceSpec, rng: np.random.Generator):
        self.query = QueryRecord(
            "q",
            TokenMatrix(rng.standard_normal((spec.l_q, spec.d_t))),
            EntitySet(
                tuple(f"e{i}" for i in range(spec.n_query_entities)),
                rng.standard_normal((spec.n_query_entities, spec.d_e)),
            ),
        )
        self.docs = [
            DocumentRecord(
                f"d{i:03d}",
                TokenMatrix(rng.standard_normal((spec.l_d, spec.d_t))),
                EntitySet(
                    tuple(f"e{i}_{j}" for j in range(spec.n_doc_entities)),
                    rng.standard_normal((spec.n_doc_entities, spec.d_e)),
                ),
            )
            for i in range(spec.n_candidates)
        ]
        self.scores = rng.uniform(0.5, 1.5, size=spec.n_candidates)
        self.query_noise = (
            rng.standard_normal(self.query.tokens.values.shape),
            rng.standard_normal(self.query.entities.values.shape),
        )
        self.doc_noise = [
            (
                rng.standard_normal(doc.tokens.values.shape),
                rng.standard_normal(doc.entities.values.shape),
            )
            for doc in self.docs
        ]

    def noisy_query(self, sigma: float) -> QueryRecord:
        return QueryRecord(
            self.query.query_id,
            TokenMatrix(self.query.tokens.values + sigma * self.query_noise[0]),
            EntitySet(
                self.query.entities.entity_ids,
                self.query.entities.values + sigma * self.query_noise[1],
            ),
        )

    def noisy_doc(self, index: int, sigma: float) -> DocumentRecord:
        doc = self.docs[index]
        tok_noise, ent_noise = self.doc_noise[index]
        return DocumentRecord(
            doc.doc_id,
            TokenMatrix(doc.tokens.values + sigma * tok_noise),
            EntitySet(doc.entities.entity_ids, doc.entities.values + sigma * ent_noise),
        )


def noise_sensitivity(
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    trials: int = 100,
    seed: int = 0,
    spec: NoiseInstanceSpec | None = None,
    model: Model | None = None,
    op: str | None = None,
) -> NoiseReport:
    """Perturb inputs with Gaussian noise and measure what moves.

    Per trial and level: the angular deviation (degrees) of the pooled
    interaction feature vector of one (query, doc) pair, the deviation
    norm per unit of injected noise, and the Kendall tau between the
    clean and noisy rankings of the candidate pool under a fixed model.
    ``op`` narrows the measured vector to a single operation's blocks;
    by default every active block is measured. Zero noise reports
    exactly (0 degrees, 0, tau = 1). Trials whose clean feature vector
    has zero norm are skipped and counted.
    """
    spec = NoiseInstanceSpec() if spec is None else spec
    if op is not None and op not in CANONICAL_OPS:
        raise ValueError(f"unknown interaction op {op!r}")
    if model is None:
        base = AblationConfig() if op is None else AblationConfig(ops=frozenset({op}))
        model = init_model(spec.d_t, spec.d_e, base, seed=[seed, 0])
    config = model.config
    if op is not None and op not in config.ops:
        raise ValueError(f"op {op!r} is not active in the model configuration")
    probe_config = (
        config if op is None else dataclasses.replace(config, ops=frozenset({op}))
    )
    trial_data = [
        _NoiseTrial(spec, np.random.default_rng([seed, 1, t])) for t in range(trials)
    ]

    def feature_vector(query, doc):
        return build_features(
            query, doc, probe_config, 1.0, adapter=model.adapter, d_t=spec.d_t, d_e=spec.d_e
        ).vector

    def pool_scores(query, docs, scores):
        return [
            score_features(
                model,
                build_features(
                    query,
                    doc,
                    config,
                    s,
                    adapter=model.adapter,
                    d_t=spec.d_t,
                    d_e=spec.d_e,
                ).vector,
            )
            for doc, s in zip(docs, scores)
        ]

    levels = []
    for sigma in sigmas:
        angles: list[float] = []
        amps: list[float] = []
        taus: list[float] = []
        skipped = 0
        for trial in trial_data:
            clean_vec = feature_vector(trial.query, trial.docs[0])
            if float(np.linalg.norm(clean_vec)) == 0.0:
                skipped += 1
                continue
            if sigma == 0.0:
                angles.append(0.0)
                amps.append(0.0)
                taus.append(1.0)
                continue
            noisy_query = trial.noisy_query(sigma)
            noisy_vec = feature_vector(noisy_query, trial.noisy_doc(0, sigma))
            angle = _angle_degrees(clean_vec, noisy_vec)
            if angle is None:
                skipped += 1
                continue
            injected = np.concatenate(
                [
                    trial.query_noise[0].ravel(),
                    trial.query_noise[1].ravel(),
                    trial.doc_noise[0][0].ravel(),
                    trial.doc_noise[0][1].ravel(),
                ]
            )
            noise_norm = sigma * float(np.linalg.norm(injected))
            angles.append(angle)
            amps.append(float(np.linalg.norm(noisy_vec - clean_vec)) / noise_norm)
            clean_scores = pool_scores(trial.query, trial.docs, trial.scores)
            noisy_docs = [trial.noisy_doc(i, sigma) for i in range(len(trial.docs))]
            noisy_scores = pool_scores(noisy_query, noisy_docs, trial.scores)
            taus.append(kendall_tau(clean_scores, noisy_scores))
        n = len(angles)
        levels.append(
            NoiseLevelStats(
                sigma=float(sigma),
                mean_angle_deg=sum(angles) / n if n else 0.0,
                mean_amplification=sum(amps) / n if n else 0.0,
                mean_rank_tau=sum(taus) / n if n else 0.0,
                n_trials=n,
                n_skipped=skipped,
            )
        )
    return NoiseReport(tuple(levels))


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------

ALL_OPS = frozenset({"add", "multiply", "subtract"})

ABLATION_VARIANTS: dict[str, dict] = {
    "all-interactions": {"ops": ALL_OPS},
    "no-subtract": {"ops": frozenset({"add", "multiply"})},
    "no-add": {"ops": frozenset({"multiply", "subtract"})},
    "no-multiply": {"ops": frozenset({"add", "subtract"})},
    "only-add": {"ops": frozenset({"add"})},
    "only-multiply": {"ops": frozenset({"multiply"})},
    "only-subtract": {"ops": frozenset({"subtract"})},
    "no-interactions": {"ops": frozenset()},
    "linear-head": {"head": "linear"},
    "no-entities": {"use_entity": False},
    "no-score-scaling": {"score_scaling": False},
}


@dataclass(frozen=True)
class AblationOutcome:
    name: str
    map_score: float
    oof_rankings: dict[str, list[tuple[str, float]]]


def _variant_config(base: TrainConfig, overrides: Mapping) -> TrainConfig:
    ablation_fields = {k: v for k, v in overrides.items() if k != "head"}
    config = base
    if ablation_fields:
        config = dataclasses.replace(
            config, ablation=dataclasses.replace(base.ablation, **ablation_fields)
        )
    if "head" in overrides:
        config = dataclasses.replace(config, head=overrides["head"])
    return config


def _oof_map(rankings: Mapping[str, Sequence[tuple[str, float]]], qrels) -> float:
    values = []
    for qid, ranking in rankings.items():
        grades = qrels.get(qid, {})
        if not any(g > 0 for g in grades.values()):
            continue
        values.append(average_precision([doc for doc, _ in ranking], grades))
    return sum(values) / len(values) if values else 0.0


def ablation_suite(
    dataset: Dataset,
    base: TrainConfig,
    names: Sequence[str] | None = None,
    threads: int = 1,
) -> dict[str, AblationOutcome]:
    """Cross-validate every architectural variant on one dataset.

    Each variant changes exactly one aspect of the base configuration.
    Returned MAP values are computed on the stitched out-of-fold
    rankings.
    """
    chosen = list(ABLATION_VARIANTS) if names is None else list(names)
    unknown = [n for n in chosen if n not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}")
    outcomes: dict[str, AblationOutcome] = {}
    for name in chosen:
        config = _variant_config(base, ABLATION_VARIANTS[name])
        result = cross_validate(dataset, config, threads)
        outcomes[name] = AblationOutcome(
            name, _oof_map(result.oof_rankings, dataset.qrels), result.oof_rankings
        )
    return outcomes


# ---------------------------------------------------------------------------
# operation agreement
# ---------------------------------------------------------------------------


def correlate_operation_scores(
    scores: Mapping[str, Mapping[tuple[str, str], float]],
) -> dict[tuple[str, str], float]:
    """Pairwise Spearman correlation between per-op score tables.

    Keys of the inner maps are (query_id, doc_id); each pair of ops is
    correlated over the intersection of their scored pairs.
    """
    ops = sorted(scores)
    out: dict[tuple[str, str], float] = {}
    for i, op_a in enumerate(ops):
        for op_b in ops[i + 1 :]:
            common = sorted(set(scores[op_a]) & set(scores[op_b]))
            if len(common) < 2:
                raise ValueError(f"ops {op_a!r} and {op_b!r} share too few scored pairs")
            out[(op_a, op_b)] = spearman(
                [scores[op_a][k] for k in common],
                [scores[op_b][k] for k in common],
            )
    return out


def operation_correlation(
    dataset: Dataset,
    base: TrainConfig,
    ops: Sequence[str] = ("multiply", "add", "subtract"),
    threads: int = 1,
) -> dict[tuple[str, str], float]:
    """How much single-op models agree on held-out rankings.

    Trains one model per op (all other settings shared), collects each
    model's out-of-fold scores, and correlates them pairwise.
    """
    tables: dict[str, dict[tuple[str, str], float]] = {}
    for op in ops:
        config = dataclasses.replace(
            base, ablation=dataclasses.replace(base.ablation, ops=frozenset({op}))
        )
        result = cross_validate(dataset, config, threads)
        tables[op] = {
            (qid, doc_id): score
            for qid, ranking in result.oof_rankings.items()
            for doc_id, score in ranking
        }
    return correlate_operation_scores(tables)


# ---------------------------------------------------------------------------
# embedding dumps
# ---------------------------------------------------------------------------

DUMP_MODES = ("query_specific", "static_pool")
LABEL_SCHEMES = ("relevance", "topic")


@dataclass(frozen=True)
class EmbeddingDump:
    points: np.ndarray
    labels: tuple
    pairs: tuple[tuple[str, str], ...]
    mode: str
    label_scheme: str


def embedding_dump(
    dataset: Dataset,
    config: AblationConfig,
    mode: str = "query_specific",
    label_scheme: str = "relevance",
    query_ids: Sequence[str] | None = None,
) -> EmbeddingDump:
    """One point per retrieved (query, doc) pair for cluster analysis.

    ``query_specific`` emits the interaction feature vector, which
    depends on both sides; ``static_pool`` emits the document's mean
    token row, which ignores the query. Labels are binary relevance
    (grade >= 1) or the query id.
    """
    if mode not in DUMP_MODES:
        raise ValueError(f"unknown dump mode {mode!r}")
    if label_scheme not in LABEL_SCHEMES:
        raise ValueError(f"unknown label scheme {label_scheme!r}")
    qids = sorted(dataset.run) if query_ids is None else list(query_ids)
    points: list[np.ndarray] = []
    labels: list = []
    pairs: list[tuple[str, str]] = []
    for qid in qids:
        query = dataset.queries[qid]
        grades = dataset.qrels.get(qid, {})
        for cand in dataset.run.get(qid, []):
            doc = dataset.documents[cand.doc_id]
            if mode == "query_specific":
                point = build_features(
                    query,
                    doc,
                    config,
                    cand.score,
                    d_t=dataset.d_t,
                    d_e=dataset.d_e,
                ).vector
            else:
                point = doc.tokens.values.mean(axis=0)
            points.append(point)
            pairs.append((qid, cand.doc_id))
            if label_scheme == "relevance":
                labels.append(1 if grades.get(cand.doc_id, 0) >= 1 else 0)
            else:
                labels.append(qid)
    return EmbeddingDump(
        points=np.stack(points) if points else np.zeros((0, 0)),
        labels=tuple(labels),
        pairs=tuple(pairs),
        mode=mode,
        label_scheme=label_scheme,
    )
