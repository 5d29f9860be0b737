"""Readers for the raw input files.

Three inputs feed an export:

- text collections (corpus or query set): TSV ``id<TAB>text`` or NDJSON
  ``{"id": ..., "text": ...}``, sniffed per file from the first
  non-blank line;
- query entities: TSV ``qid<TAB>entity_id<TAB>score``;
- entity vectors: TSV ``entity_id<TAB>v1 v2 ...`` with whitespace-
  separated float components.

All readers reject duplicates and malformed rows with ``path:line``
messages rather than guessing.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .errors import ExportError


def read_texts(path: str) -> list[tuple[str, str]]:
    """Load ``(id, text)`` pairs in file order.

    Blank lines are skipped. TSV text keeps interior tabs: only the
    first tab separates the id.
    """
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    mode = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if mode is None:
                mode = "ndjson" if line.lstrip().startswith("{") else "tsv"
            if mode == "ndjson":
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ExportError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
                if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                    raise ExportError(f"{path}:{lineno}: expected an object with id and text")
                rid, text = obj["id"], obj["text"]
                if not isinstance(rid, str) or not isinstance(text, str):
                    raise ExportError(f"{path}:{lineno}: id and text must be strings")
            else:
                if "\t" not in line:
                    raise ExportError(f"{path}:{lineno}: expected id<TAB>text")
                rid, text = line.split("\t", 1)
            if not rid:
                raise ExportError(f"{path}:{lineno}: empty id")
            if rid in seen:
                raise ExportError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            out.append((rid, text))
    return out


def read_query_entities(path: str) -> dict[str, list[tuple[str, float]]]:
    """Load per-query entity candidates with scores.

    Repeated ``(qid, entity_id)`` rows collapse to the highest score;
    order of first appearance is kept.
    """
    scores: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ExportError(
                    f"{path}:{lineno}: expected qid<TAB>entity_id<TAB>score, got {len(parts)} fields"
                )
            qid, eid, raw_score = parts
            if not qid or not eid:
                raise ExportError(f"{path}:{lineno}: empty id")
            try:
                score = float(raw_score)
            except ValueError:
                raise ExportError(f"{path}:{lineno}: bad score {raw_score!r}") from None
            if not math.isfinite(score):
                raise ExportError(f"{path}:{lineno}: non-finite score")
            per_query = scores.setdefault(qid, {})
            per_query[eid] = max(per_query.get(eid, score), score)
    return {qid: list(entries.items()) for qid, entries in scores.items()}


@dataclasses.dataclass(frozen=True)
class EntityVectors:
    """Pretrained entity embeddings keyed by entity id."""

    vectors: dict[str, np.ndarray]
    dim: int

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, entity_id: str) -> np.ndarray:
        return self.vectors[entity_id]


def read_entity_vectors(path: str) -> EntityVectors:
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ExportError(f"{path}:{lineno}: expected entity_id<TAB>components")
            eid, rest = line.split("\t", 1)
            if not eid:
                raise ExportError(f"{path}:{lineno}: empty entity id")
            if eid in vectors:
                raise ExportError(f"{path}:{lineno}: duplicate entity id {eid!r}")
            fields = rest.split()
            if not fields:
                raise ExportError(f"{path}:{lineno}: no vector components")
            try:
                values = np.array([float(f) for f in fields])
            except ValueError:
                raise ExportError(f"{path}:{lineno}: bad vector component") from None
            if not np.all(np.isfinite(values)):
                raise ExportError(f"{path}:{lineno}: non-finite vector component")
            if dim is None:
                dim = values.size
            elif values.size != dim:
                raise ExportError(
                    f"{path}:{lineno}: vector has {values.size} components, expected {dim}"
                )
            vectors[eid] = values
    if dim is None:
        raise ExportError(f"{path}: no entity vectors")
    return EntityVectors(vectors, dim)
