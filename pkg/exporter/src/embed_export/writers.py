"""Emitters for the re-ranker's ingestion formats.

The formats are a published byte-level contract, reproduced here rather
than imported so this package stays independent of the engine:

- NDJSON: one object per line with the fixed key order
  ``id, tok, ent_ids, ent``, compact separators, floats rounded through
  float32 so their repr round-trips to the on-disk value;
- packed: little-endian binary. Header: magic ``QDER``, format version
  u32, d_t u32, d_e u32. Per record: id length u32 + UTF-8 id, l u32,
  l*d_t float32 tokens, n u32, n entity-id strings (u32 length +
  UTF-8), n*d_e float32 entities.

Writers are deterministic: the same records produce the same bytes.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections.abc import Sequence

import numpy as np

from .errors import ExportError

PACKED_MAGIC = b"QDER"
PACKED_VERSION = 1

_U32 = struct.Struct("<I")


@dataclasses.dataclass(frozen=True)
class Record:
    """One exported text: token matrix plus resolved entity vectors."""

    record_id: str
    tokens: np.ndarray  # (l, d_t) float64
    entity_ids: tuple[str, ...]
    entities: np.ndarray  # (n, d_e) float64


def _f32(x: float) -> float:
    return float(np.float32(x))


def write_ndjson(records: Sequence[Record], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            obj = {
                "id": record.record_id,
                "tok": [[_f32(v) for v in row] for row in record.tokens],
                "ent_ids": list(record.entity_ids),
                "ent": [[_f32(v) for v in row] for row in record.entities],
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def write_packed(records: Sequence[Record], path: str, d_t: int, d_e: int) -> None:
    with open(path, "wb") as fh:
        fh.write(PACKED_MAGIC)
        fh.write(_U32.pack(PACKED_VERSION))
        fh.write(_U32.pack(d_t))
        fh.write(_U32.pack(d_e))
        for record in records:
            encoded = record.record_id.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(record.tokens.shape[0]))
            fh.write(record.tokens.astype("<f4").tobytes())
            fh.write(_U32.pack(record.entities.shape[0]))
            for entity_id in record.entity_ids:
                eb = entity_id.encode("utf-8")
                fh.write(_U32.pack(len(eb)))
                fh.write(eb)
            fh.write(record.entities.astype("<f4").tobytes())


def write_records(
    records: Sequence[Record], path: str, output_format: str, d_t: int, d_e: int
) -> None:
    """Dispatch on the configured output format."""
    if output_format == "ndjson":
        write_ndjson(records, path)
    elif output_format == "packed":
        write_packed(records, path, d_t, d_e)
    else:
        raise ExportError(f"unknown output format {output_format!r}")
