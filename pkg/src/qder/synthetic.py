"""Synthetic retrieval data with a planted interaction signal.

Each query gets its own unit directions (one per channel). Query item
rows carry the direction with balanced +/- signs, so the query's mean
row is nearly zero; relevant documents carry the same direction, again
sign-balanced, scaled by a per-grade strength. Attention lines up rows
of matching sign, so the element-wise product of a query row and its
attended document row is positive in every coordinate regardless of the
row's sign. Pooled multiply features therefore expose relevance while
pooled sums and raw pooled rows stay near zero: a head over multiply
features can solve the task and one over pooled representations alone
cannot.

First-stage scores are drawn independently of relevance, so the input
ranking carries no usable ordering signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import (
    Candidate,
    DocumentRecord,
    EntitySet,
    QrelEntry,
    QueryRecord,
    TokenMatrix,
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and strength of one generated collection.

    Row counts must be even so signed rows can balance exactly.
    """

    n_queries: int = 40
    n_candidates: int = 100
    n_grade1: int = 8
    n_grade2: int = 4
    l_q: int = 8
    l_d: int = 16
    n_query_entities: int = 4
    n_doc_entities: int = 6
    d_t: int = 16
    d_e: int = 8
    signal_grade1: float = 0.7
    signal_grade2: float = 1.0
    query_amplitude: float = 2.0
    noise: float = 0.05
    entity_free_rate: float = 0.05
    n_explicit_zero: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("l_q", "l_d", "n_query_entities", "n_doc_entities"):
            if getattr(self, name) % 2 != 0 or getattr(self, name) < 2:
                raise ValueError(f"{name} must be even and >= 2")
        if self.n_grade1 + self.n_grade2 >= self.n_candidates:
            raise ValueError("relevant docs must be fewer than candidates")

    @staticmethod
    def small(seed: int = 0) -> "SyntheticSpec":
        """A fast 10-query variant for end-to-end smoke checks."""
        return SyntheticSpec(
            n_queries=10,
            n_candidates=30,
            n_grade1=4,
            n_grade2=2,
            d_t=8,
            d_e=4,
            n_explicit_zero=6,
            seed=seed,
        )


@dataclass(frozen=True)
class SyntheticData:
    queries: dict[str, QueryRecord]
    documents: dict[str, DocumentRecord]
    run: dict[str, list[Candidate]]
    qrels: list[QrelEntry]


def _balanced_signs(rng: np.random.Generator, n: int) -> np.ndarray:
    signs = np.array([1.0] * (n // 2) + [-1.0] * (n // 2))
    return signs[rng.permutation(n)]


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _signal_rows(rng, n_rows, direction, strength, noise):
    signs = _balanced_signs(rng, n_rows)
    base = np.outer(signs * strength, direction)
    return base + rng.normal(0.0, noise, size=base.shape)


def _noise_rows(rng, n_rows, dim, noise):
    return rng.normal(0.0, noise, size=(n_rows, dim))


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Build queries, documents, a score-ordered run, and judgments."""
    queries: dict[str, QueryRecord] = {}
    documents: dict[str, DocumentRecord] = {}
    run: dict[str, list[Candidate]] = {}
    qrels: list[QrelEntry] = []
    n_relevant = spec.n_grade1 + spec.n_grade2
    for q_index in range(spec.n_queries):
        rng = np.random.default_rng([spec.seed, q_index])
        qid = f"Q{q_index:03d}"
        u_text = _unit(rng, spec.d_t)
        u_entity = _unit(rng, spec.d_e)
        queries[qid] = QueryRecord(
            qid,
            TokenMatrix(
                _signal_rows(rng, spec.l_q, u_text, spec.query_amplitude, spec.noise)
            ),
            EntitySet(
                tuple(f"E{q_index:03d}_{j}" for j in range(spec.n_query_entities)),
                _signal_rows(
                    rng, spec.n_query_entities, u_entity, spec.query_amplitude, spec.noise
                ),
            ),
        )
        grades = [2] * spec.n_grade2 + [1] * spec.n_grade1
        grades += [0] * (spec.n_candidates - n_relevant)
        candidates = []
        for d_index, grade in enumerate(grades):
            doc_id = f"D{q_index:03d}_{d_index:03d}"
            if grade > 0:
                strength = spec.signal_grade2 if grade == 2 else spec.signal_grade1
                tokens = _signal_rows(rng, spec.l_d, u_text, strength, spec.noise)
                ent_values = _signal_rows(
                    rng, spec.n_doc_entities, u_entity, strength, spec.noise
                )
                entities = EntitySet(
                    tuple(f"E{doc_id}_{j}" for j in range(spec.n_doc_entities)),
                    ent_values,
                )
            else:
                tokens = _noise_rows(rng, spec.l_d, spec.d_t, spec.noise)
                if rng.uniform() < spec.entity_free_rate:
                    entities = EntitySet.empty(spec.d_e)
                else:
                    entities = EntitySet(
                        tuple(f"E{doc_id}_{j}" for j in range(spec.n_doc_entities)),
                        _noise_rows(rng, spec.n_doc_entities, spec.d_e, spec.noise),
                    )
            documents[doc_id] = DocumentRecord(doc_id, TokenMatrix(tokens), entities)
            candidates.append((doc_id, grade))
        scores = rng.uniform(0.5, 1.5, size=spec.n_candidates)
        order = np.argsort(-scores, kind="stable")
        run[qid] = [
            Candidate(qid, candidates[i][0], float(scores[i]), rank)
            for rank, i in enumerate(order, start=1)
        ]
        for doc_id, grade in candidates[:n_relevant]:
            qrels.append(QrelEntry(qid, doc_id, grade))
        zero_pool = [doc_id for doc_id, grade in candidates[n_relevant:]]
        n_zero = min(spec.n_explicit_zero, len(zero_pool))
        chosen = rng.choice(len(zero_pool), size=n_zero, replace=False)
        for i in sorted(chosen):
            qrels.append(QrelEntry(qid, zero_pool[i], 0))
    return SyntheticData(queries, documents, run, qrels)
