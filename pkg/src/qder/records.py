"""In-memory data model: embedding records, run candidates, judgments.

Embeddings are stored as float64 working-precision arrays regardless of
the on-disk float32 encoding. Loaded arrays are frozen (non-writeable)
so records can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Documents longer than this are rejected at validation (not truncated).
MAX_SEQ_LEN = 512


def _as_matrix(values, rows: int | None = None, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        # an empty nested list arrives 1-d; a true (0, d) matrix must
        # keep its column count
        n_rows = rows if rows is not None else (arr.shape[0] if arr.ndim == 2 else 0)
        n_cols = dim if dim is not None else (arr.shape[1] if arr.ndim == 2 else 0)
        arr = arr.reshape(n_rows, n_cols)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TokenMatrix:
    """Contextualized token embeddings for one text, one row per token."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_matrix(self.values))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EntitySet:
    """Entity embeddings plus their opaque identifiers; may be empty."""

    entity_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entity_ids", tuple(self.entity_ids))
        object.__setattr__(self, "values", _as_matrix(self.values, rows=len(self.entity_ids)))

    @classmethod
    def empty(cls, dim: int) -> "EntitySet":
        return cls((), np.zeros((0, dim)))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    tokens: TokenMatrix
    entities: EntitySet


@dataclass(frozen=True)
class DocumentRecord:
    doc_id: str
    tokens: TokenMatrix
    entities: EntitySet


@dataclass(frozen=True)
class Candidate:
    """One first-stage result: external score plus its 1-based rank."""

    query_id: str
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class QrelEntry:
    query_id: str
    doc_id: str
    grade: int


def validate_record(
    record: QueryRecord | DocumentRecord,
    expected_dt: int | None = None,
    expected_de: int | None = None,
    max_seq_len: int = MAX_SEQ_LEN,
) -> list[str]:
    """Check a record against the data-model invariants.

    Returns a list of human-readable violations; an empty list means the
    record is clean. Never raises: this is a reporting operation used by
    both the loaders and the validate command.
    """
    violations: list[str] = []
    if isinstance(record, DocumentRecord):
        rid, kind = record.doc_id, "document"
    else:
        rid, kind = record.query_id, "query"

    def issue(msg: str) -> None:
        violations.append(f"{kind} {rid!r}: {msg}")

    if not rid:
        violations.append(f"{kind} has an empty id")

    tok = record.tokens
    if tok.rows < 1:
        issue("token matrix has no rows (texts must yield at least one token)")
    if tok.dim < 1:
        issue("token dim must be >= 1")
    if expected_dt is not None and tok.dim != expected_dt:
        issue(f"token dim {tok.dim} != expected {expected_dt}")
    if not np.all(np.isfinite(tok.values)):
        issue("non-finite value in token matrix")
    if kind == "document" and tok.rows > max_seq_len:
        issue(f"token matrix has {tok.rows} rows, exceeding max_seq_len {max_seq_len}")

    ent = record.entities
    if ent.rows != len(ent.entity_ids):
        issue(f"entity matrix has {ent.rows} rows but {len(ent.entity_ids)} entity ids")
    if expected_de is not None and ent.rows > 0 and ent.dim != expected_de:
        issue(f"entity dim {ent.dim} != expected {expected_de}")
    if ent.values.size and not np.all(np.isfinite(ent.values)):
        issue("non-finite value in entity matrix")

    return violations
