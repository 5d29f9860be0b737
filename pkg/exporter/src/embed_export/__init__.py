"""Export raw text collections to the re-ranker's ingestion formats."""

from .encoders import HashEncoder, HfEncoder, get_encoder, tokenize
from .errors import ExportError
from .export import (
    OUTPUT_FORMATS,
    ExportConfig,
    ExportReport,
    export_documents,
    export_queries,
)
from .inputs import EntityVectors, read_entity_vectors, read_query_entities, read_texts
from .linking import DictionaryLinker, Mention, WatLinker, get_linker
from .writers import (
    PACKED_MAGIC,
    PACKED_VERSION,
    Record,
    write_ndjson,
    write_packed,
    write_records,
)

__all__ = [
    "DictionaryLinker",
    "EntityVectors",
    "ExportConfig",
    "ExportError",
    "ExportReport",
    "HashEncoder",
    "HfEncoder",
    "Mention",
    "OUTPUT_FORMATS",
    "PACKED_MAGIC",
    "PACKED_VERSION",
    "Record",
    "WatLinker",
    "export_documents",
    "export_queries",
    "get_encoder",
    "get_linker",
    "read_entity_vectors",
    "read_query_entities",
    "read_texts",
    "tokenize",
    "write_ndjson",
    "write_packed",
    "write_records",
]
