"""On-disk formats and loaders.

Corpus / query files (one record per text):

- NDJSON: one object per line,
  ``{"id": str, "tok": [[f32 x d_t] x l], "ent_ids": [str x n], "ent": [[f32 x d_e] x n]}``
- packed: little-endian binary. Header: magic ``QDER``, format version u32,
  d_t u32, d_e u32. Per record: id length u32 + UTF-8 id, l u32,
  l*d_t float32 tokens, n u32, n entity-id strings (u32 length + UTF-8),
  n*d_e float32 entities.

Run files are 6-column TREC (``qid Q0 docid rank score tag``), qrels are
4-column (``qid 0 docid grade``).

Embeddings are float32 on disk and widened to float64 on load; writers
round through float32 so a write/load round trip is bit-exact in either
format.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataFormatError
from .records import (
    Candidate,
    DocumentRecord,
    EntitySet,
    QrelEntry,
    QueryRecord,
    TokenMatrix,
    validate_record,
)

logger = logging.getLogger(__name__)

PACKED_MAGIC = b"QDER"
PACKED_VERSION = 1

_U32 = struct.Struct("<I")


def _f32_json(x: float) -> float:
    # Round to the on-disk float32 grid; repr of the resulting double is
    # shortest-round-trip, so load -> float32 recovers the exact value.
    return float(np.float32(x))


def detect_format(path: str) -> str:
    """Sniff ``ndjson`` vs ``packed`` from the first bytes of the file."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "packed" if head == PACKED_MAGIC else "ndjson"


# ---------------------------------------------------------------------------
# corpus / query records
# ---------------------------------------------------------------------------


def _record_from_fields(rid, tok, ent_ids, ent, d_t, d_e, kind, where):
    if not isinstance(rid, str) or not rid:
        raise DataFormatError(f"{where}: missing or empty id")
    try:
        tokens = TokenMatrix(np.asarray(tok, dtype=np.float64).reshape(len(tok), -1) if tok else np.zeros((0, d_t or 0)))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"{where}: malformed token matrix ({exc})") from exc
    ids = tuple(str(e) for e in ent_ids)
    try:
        if ent:
            values = np.asarray(ent, dtype=np.float64).reshape(len(ent), -1)
        else:
            values = np.zeros((0, d_e if d_e is not None else 0))
        entities = EntitySet(ids, values)
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"{where}: malformed entity matrix ({exc})") from exc
    if kind == "query":
        return QueryRecord(rid, tokens, entities)
    return DocumentRecord(rid, tokens, entities)


def _check_record(record, d_t, d_e, where):
    violations = validate_record(record, expected_dt=d_t, expected_de=d_e)
    if violations:
        raise DataFormatError(f"{where}: " + "; ".join(violations))


def _load_ndjson(path: str, kind: str):
    records = {}
    d_t = d_e = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataFormatError(f"{where}: expected a JSON object")
            missing = {"id", "tok", "ent_ids", "ent"} - obj.keys()
            if missing:
                raise DataFormatError(f"{where}: missing keys {sorted(missing)}")
            record = _record_from_fields(
                obj["id"], obj["tok"], obj["ent_ids"], obj["ent"], d_t, d_e, kind, where
            )
            if d_t is None:
                d_t = record.tokens.dim
            if d_e is None and record.entities.rows > 0:
                d_e = record.entities.dim
            _check_record(record, d_t, d_e, where)
            rid = obj["id"]
            if rid in records:
                raise DataFormatError(f"{where}: duplicate id {rid!r}")
            records[rid] = record
    if d_e is not None:
        # records parsed before the first entity-bearing one carry a
        # placeholder (0, 0) entity matrix; give them the file's dim
        for rid, record in records.items():
            if record.entities.rows == 0 and record.entities.dim != d_e:
                records[rid] = dataclasses.replace(record, entities=EntitySet.empty(d_e))
    return records


class _PackedReader:
    def __init__(self, path: str):
        self.path = path
        self.fh = open(path, "rb")

    def close(self):
        self.fh.close()

    def _take(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise DataFormatError(
                f"{self.path}: truncated while reading {what} at byte {self.fh.tell() - len(data)}"
            )
        return data

    def u32(self, what: str) -> int:
        return _U32.unpack(self._take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(f"{what} length")
        try:
            return self._take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{self.path}: invalid UTF-8 in {what}") from exc

    def f32_matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        data = self._take(4 * rows * cols, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(rows, cols)

    def at_eof(self) -> bool:
        pos = self.fh.tell()
        if self.fh.read(1) == b"":
            return True
        self.fh.seek(pos)
        return False


def _load_packed(path: str, kind: str):
    records = {}
    reader = _PackedReader(path)
    try:
        if reader._take(4, "magic") != PACKED_MAGIC:
            raise DataFormatError(f"{path}: not a packed corpus file (bad magic)")
        version = reader.u32("format version")
        if version != PACKED_VERSION:
            raise DataFormatError(f"{path}: unsupported packed version {version}")
        d_t = reader.u32("d_t")
        d_e = reader.u32("d_e")
        index = 0
        while not reader.at_eof():
            where = f"{path}: record {index}"
            rid = reader.string("record id")
            l = reader.u32("token count")
            tokens = reader.f32_matrix(l, d_t, "token matrix")
            n = reader.u32("entity count")
            ids = tuple(reader.string("entity id") for _ in range(n))
            entities = reader.f32_matrix(n, d_e, "entity matrix")
            if kind == "query":
                record = QueryRecord(rid, TokenMatrix(tokens), EntitySet(ids, entities))
            else:
                record = DocumentRecord(rid, TokenMatrix(tokens), EntitySet(ids, entities))
            _check_record(record, d_t, d_e, where)
            if rid in records:
                raise DataFormatError(f"{where}: duplicate id {rid!r}")
            records[rid] = record
            index += 1
    finally:
        reader.close()
    return records


def load_corpus(path: str, format: str = "auto") -> dict[str, DocumentRecord]:
    """Load a document corpus into a map doc_id -> DocumentRecord."""
    fmt = detect_format(path) if format == "auto" else format
    if fmt == "ndjson":
        return _load_ndjson(path, "document")
    if fmt == "packed":
        return _load_packed(path, "document")
    raise ValueError(f"unknown corpus format {format!r}")


def load_queries(path: str, format: str = "auto") -> dict[str, QueryRecord]:
    """Load a query file (same formats as the corpus, id = query_id)."""
    fmt = detect_format(path) if format == "auto" else format
    if fmt == "ndjson":
        return _load_ndjson(path, "query")
    if fmt == "packed":
        return _load_packed(path, "query")
    raise ValueError(f"unknown query format {format!r}")


def write_corpus_ndjson(records: Iterable[QueryRecord | DocumentRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            rid = record.doc_id if isinstance(record, DocumentRecord) else record.query_id
            obj = {
                "id": rid,
                "tok": [[_f32_json(v) for v in row] for row in record.tokens.values],
                "ent_ids": list(record.entities.entity_ids),
                "ent": [[_f32_json(v) for v in row] for row in record.entities.values],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def write_corpus_packed(
    records: Sequence[QueryRecord | DocumentRecord],
    path: str,
    d_t: int | None = None,
    d_e: int | None = None,
) -> None:
    """Write records in the packed binary format.

    Dims are taken from the records when not given; an empty record list
    requires explicit dims for the header.
    """
    records = list(records)
    if records:
        d_t = records[0].tokens.dim if d_t is None else d_t
        if d_e is None:
            d_e = next((r.entities.dim for r in records if r.entities.rows > 0), 0)
    if d_t is None or d_e is None:
        raise ValueError("d_t and d_e are required when writing an empty corpus")
    with open(path, "wb") as fh:
        fh.write(PACKED_MAGIC)
        fh.write(_U32.pack(PACKED_VERSION))
        fh.write(_U32.pack(d_t))
        fh.write(_U32.pack(d_e))
        for record in records:
            rid = record.doc_id if isinstance(record, DocumentRecord) else record.query_id
            encoded = rid.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(record.tokens.rows))
            fh.write(record.tokens.values.astype("<f4").tobytes())
            fh.write(_U32.pack(record.entities.rows))
            for ent_id in record.entities.entity_ids:
                eb = ent_id.encode("utf-8")
                fh.write(_U32.pack(len(eb)))
                fh.write(eb)
            fh.write(record.entities.values.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# TREC run files
# ---------------------------------------------------------------------------


def load_run(path: str) -> dict[str, list[Candidate]]:
    """Load a TREC run into query_id -> candidates sorted by rank.

    Ranks must form 1..k per query with no duplicates; duplicate
    (query_id, doc_id) pairs are rejected.
    """
    per_query: dict[str, list[Candidate]] = {}
    seen: set[tuple[str, str]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 6 whitespace-separated columns, got {len(parts)}"
                )
            qid, _, docid, rank_s, score_s, _tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric rank or score") from exc
            if not np.isfinite(score):
                raise DataFormatError(f"{path}:{lineno}: non-finite score")
            if rank < 1:
                raise DataFormatError(f"{path}:{lineno}: rank must be >= 1")
            if (qid, docid) in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate (query, doc) pair ({qid}, {docid})")
            seen.add((qid, docid))
            per_query.setdefault(qid, []).append(Candidate(qid, docid, score, rank))
    for qid, cands in per_query.items():
        cands.sort(key=lambda c: c.rank)
        ranks = [c.rank for c in cands]
        if ranks != list(range(1, len(cands) + 1)):
            raise DataFormatError(f"{path}: query {qid!r} ranks are not contiguous 1..{len(cands)}")
    return per_query


def _tie_break(ranking: Sequence[tuple[str, float]]) -> list[tuple[str, float]]:
    # Reorder runs of consecutive equal scores by doc_id; the caller's
    # ordering is otherwise preserved.
    out: list[tuple[str, float]] = []
    group: list[tuple[str, float]] = []
    for doc_id, score in ranking:
        if group and score != group[0][1]:
            out.extend(sorted(group))
            group = []
        group.append((doc_id, float(score)))
    out.extend(sorted(group))
    return out


def write_run(
    rankings: Mapping[str, Sequence[tuple[str, float]]],
    tag: str,
    path: str,
) -> None:
    """Write rankings as a TREC run, ranks 1..k in emitted order.

    Consecutive score ties are broken by doc_id ascending so output is
    deterministic; scores must be finite. Queries are emitted in
    ascending query_id order.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(rankings):
            for rank, (doc_id, score) in enumerate(_tie_break(rankings[qid]), start=1):
                if not np.isfinite(score):
                    raise ValueError(f"non-finite score for ({qid}, {doc_id})")
                fh.write(f"{qid} Q0 {doc_id} {rank} {score!r} {tag}\n")


def run_to_rankings(run: Mapping[str, Sequence[Candidate]]) -> dict[str, list[tuple[str, float]]]:
    """Project a loaded run back to (doc_id, score) lists in rank order."""
    return {qid: [(c.doc_id, c.score) for c in cands] for qid, cands in run.items()}


# ---------------------------------------------------------------------------
# qrels
# ---------------------------------------------------------------------------


def load_qrels(path: str) -> list[QrelEntry]:
    """Load 4-column qrels; negative grades clamp to 0 with a warning."""
    entries: list[QrelEntry] = []
    seen: set[tuple[str, str]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 4 whitespace-separated columns, got {len(parts)}"
                )
            qid, _, docid, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-integer grade") from exc
            if grade < 0:
                logger.warning("%s:%d: negative grade %d clamped to 0", path, lineno, grade)
                grade = 0
            if (qid, docid) in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate qrel for ({qid}, {docid})")
            seen.add((qid, docid))
            entries.append(QrelEntry(qid, docid, grade))
    return entries


def write_qrels(entries: Iterable[QrelEntry], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.query_id} 0 {e.doc_id} {e.grade}\n")


def qrels_by_query(entries: Iterable[QrelEntry]) -> dict[str, dict[str, int]]:
    """Index qrels as query_id -> {doc_id: grade}."""
    out: dict[str, dict[str, int]] = {}
    for e in entries:
        out.setdefault(e.query_id, {})[e.doc_id] = e.grade
    return out
