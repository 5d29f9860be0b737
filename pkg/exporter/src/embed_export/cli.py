"""Command-line interface.

Two subcommands: ``docs`` exports a corpus, ``queries`` exports a query
set with externally supplied entity candidates. Progress and skip
reports go to stderr; the output file is the product.

Exit codes: 0 success, 1 export or input problems (including a document
skip rate over 1%), 2 I/O problems. Usage errors exit 2 via argparse.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExportError
from .export import OUTPUT_FORMATS, ExportConfig, export_documents, export_queries
from .inputs import read_query_entities, read_texts
from .writers import write_records

EXIT_OK = 0
EXIT_DATA = 1
EXIT_IO = 2

# over this fraction of skipped documents the export is considered failed
SKIP_BUDGET = 0.01


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--vectors", required=True, help="entity embedding table (TSV)")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--format", choices=OUTPUT_FORMATS, default="ndjson")
    p.add_argument("--encoder", default="hash:32", help="hash[:dim] or hf:<checkpoint>")
    p.add_argument("--max-seq-len", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=32)


def cmd_docs(args) -> int:
    corpus = read_texts(args.corpus)
    cfg = ExportConfig(
        vectors=args.vectors,
        encoder=args.encoder,
        linker=args.linker,
        threshold=args.threshold,
        max_seq_len=args.max_seq_len,
        batch_size=args.batch_size,
        output_format=args.format,
    )
    report = export_documents(corpus, cfg)
    write_records(report.records, args.out, cfg.output_format, report.d_t, report.d_e)
    for doc_id, reason in report.skipped:
        print(f"skipped {doc_id!r}: {reason}", file=sys.stderr)
    print(
        f"exported {len(report.records)} documents to {args.out}"
        f" ({len(report.skipped)} skipped, {report.dropped_entities} entity vectors missing)",
        file=sys.stderr,
    )
    if report.skipped and len(report.skipped) > SKIP_BUDGET * len(corpus):
        print(
            f"error: {len(report.skipped)} of {len(corpus)} documents skipped,"
            f" over the {SKIP_BUDGET:.0%} budget",
            file=sys.stderr,
        )
        return EXIT_DATA
    return EXIT_OK


def cmd_queries(args) -> int:
    queries = read_texts(args.queries)
    query_entities = read_query_entities(args.entities)
    cfg = ExportConfig(
        vectors=args.vectors,
        encoder=args.encoder,
        max_seq_len=args.max_seq_len,
        batch_size=args.batch_size,
        output_format=args.format,
        top_m=args.top_m,
    )
    report = export_queries(queries, query_entities, cfg)
    write_records(report.records, args.out, cfg.output_format, report.d_t, report.d_e)
    print(
        f"exported {len(report.records)} queries to {args.out}"
        f" ({report.dropped_entities} entity vectors missing)",
        file=sys.stderr,
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qder-export",
        description="export raw text to the re-ranker's ingestion formats",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("docs", help="export a document corpus")
    p.add_argument("--corpus", required=True, help="id<TAB>text TSV or NDJSON")
    _add_shared(p)
    p.add_argument("--linker", default="dict", help="dict or wat:<endpoint>")
    p.add_argument("--threshold", type=float, default=0.5, help="minimum mention score")
    p.set_defaults(func=cmd_docs)

    p = sub.add_parser("queries", help="export a query set")
    p.add_argument("--queries", required=True, help="id<TAB>text TSV or NDJSON")
    p.add_argument("--entities", required=True, help="qid<TAB>entity_id<TAB>score TSV")
    _add_shared(p)
    p.add_argument("--top-m", type=int, default=20, help="entities kept per query")
    p.set_defaults(func=cmd_queries)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
