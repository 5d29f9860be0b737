"""Training loop: balanced examples, query-level folds, Adam.

The embeddings are frozen, so with no adapter the feature vector of a
(query, doc) pair never changes during training; a per-config cache
computes each pair once and reuses it across epochs and folds. Training
minimizes binary cross-entropy on balanced positive/negative candidate
pairs, with a linear learning-rate warmup and early stopping on
validation MAP (ties keep the earliest epoch).
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .evaluation import average_precision
from .interaction import (
    AblationConfig,
    Model,
    backward,
    build_features,
    grads_from_features,
    init_model,
    logistic,
    score_features,
)
from .records import Candidate, DocumentRecord, QueryRecord

logger = logging.getLogger(__name__)

# rng stream tags so every random decision draws from its own
# deterministic stream derived from the run seed
_STREAM_FOLDS = 1
_STREAM_NEGATIVES = 2
_STREAM_EPOCH = 3
_STREAM_INIT = 4


def _stable_id_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the reference setup."""

    learning_rate: float = 2e-5
    batch_size: int = 20
    epochs: int = 10
    warmup_steps: int = 1000
    folds: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    head: str = "bilinear"
    adapter: bool = False
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.head not in ("bilinear", "linear"):
            raise ValueError(f"unknown head {self.head!r}")


@dataclass(frozen=True)
class Example:
    query_id: str
    doc_id: str
    label: float
    first_stage_score: float


@dataclass(frozen=True)
class FoldSplit:
    index: int
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class Dataset:
    """Everything one training or scoring run needs, pre-indexed."""

    queries: dict[str, QueryRecord]
    documents: dict[str, DocumentRecord]
    run: dict[str, list[Candidate]]
    qrels: dict[str, dict[str, int]]
    d_t: int
    d_e: int


def make_dataset(
    queries: Mapping[str, QueryRecord],
    documents: Mapping[str, DocumentRecord],
    run: Mapping[str, Sequence[Candidate]],
    qrels: Mapping[str, Mapping[str, int]],
) -> Dataset:
    """Bundle loaded pieces, checking cross-references and inferring dims."""
    for qid in run:
        if qid not in queries:
            raise ValueError(f"run references unknown query {qid!r}")
        for cand in run[qid]:
            if cand.doc_id not in documents:
                raise ValueError(f"run references unknown document {cand.doc_id!r}")
    d_t = next(iter(queries.values())).tokens.dim if queries else 0
    d_e = 0
    for record in list(queries.values()) + list(documents.values()):
        if record.entities.rows > 0:
            d_e = record.entities.dim
            break
    return Dataset(
        queries=dict(queries),
        documents=dict(documents),
        run={qid: sorted(cands, key=lambda c: c.rank) for qid, cands in run.items()},
        qrels={qid: dict(grades) for qid, grades in qrels.items()},
        d_t=d_t,
        d_e=d_e,
    )


# ---------------------------------------------------------------------------
# examples and folds
# ---------------------------------------------------------------------------


def build_examples(
    dataset: Dataset,
    query_ids: Iterable[str],
    seed: int,
) -> list[Example]:
    """Balanced positives and negatives per query.

    Positives are retrieved candidates judged relevant (grade >= 1);
    negatives are sampled without replacement, in retrieval order, from
    the grade-0-or-unjudged candidates to match the positive count.
    Queries with no positive candidate are skipped with a warning, as is
    a query with fewer negatives than positives.
    """
    examples: list[Example] = []
    for qid in sorted(query_ids):
        candidates = dataset.run.get(qid, [])
        grades = dataset.qrels.get(qid, {})
        positives = [c for c in candidates if grades.get(c.doc_id, 0) >= 1]
        pool = [c for c in candidates if grades.get(c.doc_id, 0) == 0]
        if not positives:
            logger.warning("query %s has no relevant retrieved candidate; skipped", qid)
            continue
        n = len(positives)
        if len(pool) < n:
            logger.warning(
                "query %s has %d negatives for %d positives; using all",
                qid,
                len(pool),
                n,
            )
            negatives = pool
        else:
            rng = np.random.default_rng([seed, _STREAM_NEGATIVES, _stable_id_seed(qid)])
            chosen = rng.choice(len(pool), size=n, replace=False)
            negatives = [pool[i] for i in sorted(chosen)]
        for c in positives:
            examples.append(Example(qid, c.doc_id, 1.0, c.score))
        for c in negatives:
            examples.append(Example(qid, c.doc_id, 0.0, c.score))
    return examples


def make_folds(query_ids: Iterable[str], k: int, seed: int) -> list[FoldSplit]:
    """Query-level k-fold splits with near-equal test parts.

    Queries are shuffled once (seeded), cut into k parts with any
    remainder going to the first parts, and fold i uses part i as test,
    part (i + 1) mod k as validation, and the rest as training.
    """
    ids = sorted(set(query_ids))
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(ids) < k:
        raise ValueError(f"cannot make {k} folds from {len(ids)} queries")
    rng = np.random.default_rng([seed, _STREAM_FOLDS])
    order = [ids[i] for i in rng.permutation(len(ids))]
    base, extra = divmod(len(order), k)
    parts: list[list[str]] = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        parts.append(order[start : start + size])
        start += size
    folds = []
    for i in range(k):
        val = (i + 1) % k
        train = tuple(
            qid for j, part in enumerate(parts) if j not in (i, val) for qid in part
        )
        folds.append(FoldSplit(i, train, tuple(parts[val]), tuple(parts[i])))
    return folds


# ---------------------------------------------------------------------------
# losses and the optimizer
# ---------------------------------------------------------------------------


def bce_loss(probs: Sequence[float], labels: Sequence[float]) -> float:
    """Mean binary cross-entropy of probabilities against 0/1 labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError("probs and labels must have the same length")
    if np.any((probs <= 0.0) | (probs >= 1.0)):
        raise ValueError("probabilities must lie in the open interval (0, 1)")
    losses = -(labels * np.log(probs) + (1.0 - labels) * np.log1p(-probs))
    return float(losses.mean())


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    model: Model,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[Model, AdamState]:
    """One bias-corrected Adam update with linear warmup.

    The effective rate is lr * min(1, t / warmup_steps), constant after
    warmup. Non-finite gradients abort the run rather than corrupting
    the parameters.
    """
    t = state.step + 1
    if config.warmup_steps > 0:
        lr = config.learning_rate * min(1.0, t / config.warmup_steps)
    else:
        lr = config.learning_rate
    params = model.param_arrays()
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r} at step {t}")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name] = m
        new_v[name] = v
    return model.with_params(new_params), AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# feature cache
# ---------------------------------------------------------------------------


class FeatureCache:
    """Unscaled feature vectors per (query, doc), computed on demand.

    Valid only while embeddings feed the head directly (no adapter):
    then features are constants of the data and one cache serves every
    epoch and fold of a config.
    """

    def __init__(self, dataset: Dataset, config: AblationConfig):
        self.dataset = dataset
        self.config = config
        self._store: dict[tuple[str, str], np.ndarray] = {}

    def unscaled(self, query_id: str, doc_id: str) -> np.ndarray:
        key = (query_id, doc_id)
        vector = self._store.get(key)
        if vector is None:
            plain = dataclasses.replace(self.config, score_scaling=False)
            vector = build_features(
                self.dataset.queries[query_id],
                self.dataset.documents[doc_id],
                plain,
                1.0,
                d_t=self.dataset.d_t,
                d_e=self.dataset.d_e,
            ).vector
            self._store[key] = vector
        return vector

    def features(self, query_id: str, doc_id: str, first_stage_score: float) -> np.ndarray:
        vector = self.unscaled(query_id, doc_id)
        if self.config.score_scaling:
            return vector * float(first_stage_score)
        return vector


def _example_features(dataset: Dataset, cache: FeatureCache | None, example: Example):
    if cache is not None:
        return cache.features(example.query_id, example.doc_id, example.first_stage_score)
    return None


# ---------------------------------------------------------------------------
# scoring with a model
# ---------------------------------------------------------------------------


def rank_candidates(
    model: Model,
    dataset: Dataset,
    query_id: str,
    cache: FeatureCache | None = None,
) -> list[tuple[str, float]]:
    """Re-rank one query's retrieved candidates by model probability.

    Output is sorted by probability descending, ties by doc id, so the
    ranking is deterministic.
    """
    query = dataset.queries[query_id]
    scored = []
    for cand in dataset.run.get(query_id, []):
        if cache is not None and model.adapter is None:
            vector = cache.features(query_id, cand.doc_id, cand.score)
            prob = logistic(score_features(model, vector))
        else:
            feats = build_features(
                query,
                dataset.documents[cand.doc_id],
                model.config,
                cand.score,
                adapter=model.adapter,
                d_t=dataset.d_t,
                d_e=dataset.d_e,
            )
            prob = logistic(score_features(model, feats.vector))
        scored.append((cand.doc_id, prob))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def rank_queries(
    model: Model,
    dataset: Dataset,
    query_ids: Sequence[str],
    cache: FeatureCache | None = None,
    threads: int = 1,
) -> dict[str, list[tuple[str, float]]]:
    """rank_candidates over many queries, optionally thread-parallel.

    Results are keyed by query id, so the output is identical for any
    thread count.
    """
    ids = list(query_ids)
    if threads > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranked = pool.map(lambda qid: rank_candidates(model, dataset, qid, cache), ids)
            return dict(zip(ids, ranked))
    return {qid: rank_candidates(model, dataset, qid, cache) for qid in ids}


def mean_average_precision(
    model: Model,
    dataset: Dataset,
    query_ids: Sequence[str],
    cache: FeatureCache | None = None,
    threads: int = 1,
) -> float:
    """MAP of the model's re-ranking over queries with relevant judgments."""
    rankings = rank_queries(model, dataset, query_ids, cache, threads)
    values = []
    for qid in query_ids:
        grades = dataset.qrels.get(qid, {})
        if not any(g > 0 for g in grades.values()):
            continue
        values.append(average_precision([d for d, _ in rankings[qid]], grades))
    return sum(values) / len(values) if values else 0.0


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    split: FoldSplit
    model: Model
    best_epoch: int | None
    best_val_map: float
    epoch_logs: list[dict]


def _batch_gradients(model, dataset, cache, batch):
    """Mean loss and mean per-parameter gradient over a batch."""
    total_loss = 0.0
    sums: dict[str, np.ndarray] | None = None
    for example in batch:
        if cache is not None and model.adapter is None:
            vector = _example_features(dataset, cache, example)
            loss, _, grads = grads_from_features(model, vector, example.label)
        else:
            loss, _, grads = backward(
                model,
                dataset.queries[example.query_id],
                dataset.documents[example.doc_id],
                example.first_stage_score,
                example.label,
            )
        total_loss += loss
        if sums is None:
            sums = {k: g.copy() for k, g in grads.items()}
        else:
            for k, g in grads.items():
                sums[k] += g
    n = len(batch)
    return total_loss / n, {k: g / n for k, g in sums.items()}


def train_fold(
    dataset: Dataset,
    split: FoldSplit,
    config: TrainConfig,
    cache: FeatureCache | None = None,
    threads: int = 1,
) -> FoldResult:
    """Train one fold and keep the epoch with the best validation MAP.

    Examples are reshuffled every epoch (seeded); the batch gradient is
    the mean of per-example gradients. Zero epochs returns the
    initialized model untouched.
    """
    model = init_model(
        dataset.d_t,
        dataset.d_e,
        config.ablation,
        seed=[config.seed, _STREAM_INIT, split.index],
        head=config.head,
        adapter=config.adapter,
    )
    if cache is None and not config.adapter:
        cache = FeatureCache(dataset, config.ablation)
    examples = build_examples(dataset, split.train, config.seed)
    state = init_adam(model.param_arrays())
    best_model = model
    best_epoch: int | None = None
    best_val = -math.inf
    logs: list[dict] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, _STREAM_EPOCH, split.index, epoch])
        order = rng.permutation(len(examples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            loss, grads = _batch_gradients(model, dataset, cache, batch)
            epoch_loss += loss * len(batch)
            model, state = adam_step(model, grads, state, config)
        val_map = mean_average_precision(model, dataset, split.validation, cache, threads)
        kept = val_map > best_val
        if kept:
            best_val = val_map
            best_epoch = epoch
            best_model = model
        logs.append(
            {
                "fold": split.index,
                "epoch": epoch,
                "train_loss": epoch_loss / len(examples) if examples else 0.0,
                "val_map": val_map,
                "kept": kept,
            }
        )
    if best_epoch is None:
        best_val = mean_average_precision(best_model, dataset, split.validation, cache, threads)
    return FoldResult(split, best_model, best_epoch, best_val, logs)


@dataclass
class CrossValResult:
    folds: list[FoldResult]
    oof_rankings: dict[str, list[tuple[str, float]]]
    fold_of: dict[str, int]

    @property
    def epoch_logs(self) -> list[dict]:
        return [entry for fold in self.folds for entry in fold.epoch_logs]


def eligible_query_ids(dataset: Dataset) -> list[str]:
    """Queries that are retrievable and have at least one relevant judgment."""
    return sorted(
        qid
        for qid in dataset.run
        if any(g > 0 for g in dataset.qrels.get(qid, {}).values())
    )


def cross_validate(
    dataset: Dataset,
    config: TrainConfig,
    threads: int = 1,
) -> CrossValResult:
    """Query-level k-fold training producing out-of-fold rankings.

    Each fold's best model scores its held-out test queries; folds
    share one feature cache when no adapter is trained.
    """
    ids = eligible_query_ids(dataset)
    splits = make_folds(ids, config.folds, config.seed)
    cache = None if config.adapter else FeatureCache(dataset, config.ablation)
    fold_results: list[FoldResult] = []
    oof: dict[str, list[tuple[str, float]]] = {}
    fold_of: dict[str, int] = {}
    for split in splits:
        result = train_fold(dataset, split, config, cache, threads)
        fold_results.append(result)
        rankings = rank_queries(result.model, dataset, split.test, cache, threads)
        oof.update(rankings)
        for qid in split.test:
            fold_of[qid] = split.index
    return CrossValResult(fold_results, oof, fold_of)
