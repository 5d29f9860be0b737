"""Export pipeline: raw texts to ingestion-ready records.

Documents run through encoder, linker, and vector lookup; failures are
confined to the document that caused them and reported as skips, since
a large corpus export should not die on one bad row. Queries are the
opposite: a query set is small and curated, so any query that cannot be
exported is an error.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import numpy as np

from .encoders import get_encoder
from .errors import ExportError
from .inputs import EntityVectors, read_entity_vectors
from .linking import Mention, get_linker
from .writers import Record

OUTPUT_FORMATS = ("ndjson", "packed")


@dataclasses.dataclass(frozen=True)
class ExportConfig:
    """Knobs for one export run.

    ``vectors`` is the path of the entity-embedding table. Entity
    mentions scoring below ``threshold`` are dropped. ``top_m`` caps
    how many externally supplied entities a query keeps.
    """

    vectors: str
    encoder: str = "hash:32"
    linker: str = "dict"
    threshold: float = 0.5
    max_seq_len: int = 512
    batch_size: int = 32
    output_format: str = "ndjson"
    top_m: int = 20

    def __post_init__(self):
        if self.max_seq_len < 1:
            raise ExportError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.top_m < 1:
            raise ExportError(f"top_m must be >= 1, got {self.top_m}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ExportError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.output_format not in OUTPUT_FORMATS:
            raise ExportError(f"unknown output format {self.output_format!r}")


@dataclasses.dataclass(frozen=True)
class ExportReport:
    """Outcome of an export: records in input order plus bookkeeping.

    ``skipped`` holds ``(id, reason)`` pairs for documents that could
    not be exported (always empty for queries). ``dropped_entities``
    counts entities that survived linking or selection but had no
    pretrained vector.
    """

    records: tuple[Record, ...]
    skipped: tuple[tuple[str, str], ...]
    dropped_entities: int
    d_t: int
    d_e: int


def _build_encoder(cfg: ExportConfig):
    encoder = get_encoder(cfg.encoder)
    if cfg.max_seq_len > encoder.limit:
        raise ExportError(
            f"max_seq_len {cfg.max_seq_len} exceeds the encoder limit {encoder.limit}"
        )
    return encoder


def _chunks(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _embed_chunk(encoder, token_lists: list[list[str]]):
    """Embed a batch, isolating failures to single items on retry."""
    try:
        return encoder.embed_batch(token_lists), [None] * len(token_lists)
    except Exception:
        matrices, errors = [], []
        for tokens in token_lists:
            try:
                matrices.append(encoder.embed_batch([tokens])[0])
                errors.append(None)
            except Exception as exc:
                matrices.append(None)
                errors.append(exc)
        return matrices, errors


def _resolve(mentions: list[Mention], threshold: float, vectors: EntityVectors):
    """Threshold, dedup, and vector lookup for one document's mentions.

    Mentions are taken in text order; the first mention of an entity id
    claims it. An id without a pretrained vector is dropped entirely,
    counted once.
    """
    seen: set[str] = set()
    kept_ids: list[str] = []
    rows: list[np.ndarray] = []
    missing = 0
    for mention in sorted(mentions, key=lambda m: (m.start, m.entity_id)):
        if mention.score < threshold or mention.entity_id in seen:
            continue
        seen.add(mention.entity_id)
        if mention.entity_id in vectors:
            kept_ids.append(mention.entity_id)
            rows.append(vectors.get(mention.entity_id))
        else:
            missing += 1
    matrix = np.stack(rows) if rows else np.zeros((0, vectors.dim))
    return tuple(kept_ids), matrix, missing


def export_documents(
    corpus: Sequence[tuple[str, str]],
    cfg: ExportConfig,
    *,
    encoder=None,
    linker=None,
    vectors: EntityVectors | None = None,
) -> ExportReport:
    """Export ``(doc_id, text)`` pairs to records.

    A document that yields no tokens, or whose encoder or linker call
    fails, is skipped with a reason; everything else is exported, even
    when all of its entities lost their vectors. The keyword overrides
    exist for tests and for callers that already hold the components.
    """
    encoder = _build_encoder(cfg) if encoder is None else encoder
    vectors = read_entity_vectors(cfg.vectors) if vectors is None else vectors
    linker = get_linker(cfg.linker, vectors.vectors) if linker is None else linker

    pending: list[tuple[str, list[str]]] = []
    skipped: list[tuple[str, str]] = []
    seen_ids: set[str] = set()
    for doc_id, text in corpus:
        if doc_id in seen_ids:
            raise ExportError(f"duplicate document id {doc_id!r}")
        seen_ids.add(doc_id)
        try:
            tokens = encoder.tokenize(text)[: cfg.max_seq_len]
        except Exception as exc:
            skipped.append((doc_id, f"encoder failure ({exc})"))
            continue
        if not tokens:
            skipped.append((doc_id, "yielded no tokens"))
            continue
        pending.append((doc_id, tokens))

    records: list[Record] = []
    dropped = 0
    for chunk in _chunks(pending, cfg.batch_size):
        matrices, errors = _embed_chunk(encoder, [tokens for _, tokens in chunk])
        for (doc_id, tokens), matrix, err in zip(chunk, matrices, errors):
            if err is not None:
                skipped.append((doc_id, f"encoder failure ({err})"))
                continue
            try:
                mentions = linker.link(tokens)
            except Exception as exc:
                skipped.append((doc_id, f"linker failure ({exc})"))
                continue
            kept_ids, ent, missing = _resolve(mentions, cfg.threshold, vectors)
            dropped += missing
            records.append(Record(doc_id, np.asarray(matrix, dtype=np.float64), kept_ids, ent))

    return ExportReport(tuple(records), tuple(skipped), dropped, encoder.dim, vectors.dim)


def export_queries(
    queries: Sequence[tuple[str, str]],
    query_entities: dict[str, list[tuple[str, float]]],
    cfg: ExportConfig,
    *,
    encoder=None,
    vectors: EntityVectors | None = None,
) -> ExportReport:
    """Export ``(query_id, text)`` pairs with externally linked entities.

    Per query the top ``cfg.top_m`` entities by score are kept (ties
    broken by entity id); ones without a pretrained vector are dropped
    with a count. A query that yields no tokens, or an entity row for an
    unknown query id, is an error.
    """
    encoder = _build_encoder(cfg) if encoder is None else encoder
    vectors = read_entity_vectors(cfg.vectors) if vectors is None else vectors

    seen_ids: set[str] = set()
    tokenized: list[tuple[str, list[str]]] = []
    for qid, text in queries:
        if qid in seen_ids:
            raise ExportError(f"duplicate query id {qid!r}")
        seen_ids.add(qid)
        tokens = encoder.tokenize(text)[: cfg.max_seq_len]
        if not tokens:
            raise ExportError(f"query {qid!r} yielded no tokens")
        tokenized.append((qid, tokens))
    for qid in query_entities:
        if qid not in seen_ids:
            raise ExportError(f"query entities reference unknown query id {qid!r}")

    records: list[Record] = []
    dropped = 0
    for chunk in _chunks(tokenized, cfg.batch_size):
        matrices, errors = _embed_chunk(encoder, [tokens for _, tokens in chunk])
        for (qid, _), matrix, err in zip(chunk, matrices, errors):
            if err is not None:
                raise ExportError(f"query {qid!r}: encoder failure ({err})")
            ranked = sorted(query_entities.get(qid, []), key=lambda p: (-p[1], p[0]))
            kept_ids: list[str] = []
            rows: list[np.ndarray] = []
            chosen: set[str] = set()
            for eid, _score in ranked:
                if eid in chosen:
                    continue
                if len(chosen) == cfg.top_m:
                    break
                chosen.add(eid)
                if eid in vectors:
                    kept_ids.append(eid)
                    rows.append(vectors.get(eid))
                else:
                    dropped += 1
            ent = np.stack(rows) if rows else np.zeros((0, vectors.dim))
            records.append(
                Record(qid, np.asarray(matrix, dtype=np.float64), tuple(kept_ids), ent)
            )

    return ExportReport(tuple(records), (), dropped, encoder.dim, vectors.dim)
