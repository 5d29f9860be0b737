"""Command-line interface.

Subcommands cover the full workflow: ``validate`` checks input files,
``synth`` generates a planted-signal collection, ``train`` runs
cross-validated training, ``rerank`` applies a checkpoint, ``fuse``
interpolates two runs, ``eval`` scores runs against judgments, and
``ablate`` / ``noise`` / ``cluster`` run the analysis harnesses.

Exit codes: 0 success, 1 data or validation failure, 2 I/O failure,
3 numeric failure. Commands with ``--out`` write their artifacts plus a
``manifest.json`` naming every artifact and the resolved configuration;
partially written artifacts are removed when a command fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import data_io, diagnostics, evaluation, hybrid, synthetic, trainer
from .errors import DataFormatError, NumericError, QderError
from .interaction import AblationConfig, CANONICAL_OPS, forward, load_model, save_model
from .records import validate_record

EXIT_OK = 0
EXIT_DATA = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; # comments and blank lines allowed."""
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise DataFormatError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
                value = value[1:-1]
            if not key:
                raise DataFormatError(f"{path}:{lineno}: empty key")
            if key in raw:
                raise DataFormatError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    return raw


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_ops(value: str) -> frozenset[str]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    unknown = [p for p in parts if p not in CANONICAL_OPS]
    if unknown:
        raise ValueError(f"unknown interaction ops {unknown}")
    return frozenset(parts)


_TRAIN_KEYS = {
    "learning_rate": float,
    "batch_size": int,
    "epochs": int,
    "warmup_steps": int,
    "folds": int,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "seed": int,
    "head": str,
    "adapter": _parse_bool,
    "ops": _parse_ops,
    "use_text": _parse_bool,
    "use_entity": _parse_bool,
    "score_scaling": _parse_bool,
}


def build_train_config(path: str | None, seed_override: int | None = None) -> trainer.TrainConfig:
    """TrainConfig from an optional config file; unknown keys fail."""
    raw = parse_config_file(path) if path else {}
    unknown = set(raw) - set(_TRAIN_KEYS)
    if unknown:
        raise DataFormatError(f"{path}: unknown config keys {sorted(unknown)}")
    values: dict = {}
    for key, text in raw.items():
        try:
            values[key] = _TRAIN_KEYS[key](text)
        except ValueError as exc:
            raise DataFormatError(f"{path}: bad value for {key!r}: {exc}") from exc
    ablation_keys = {"ops", "use_text", "use_entity", "score_scaling"}
    ablation = AblationConfig(
        **{k: values.pop(k) for k in list(values) if k in ablation_keys}
    )
    config = trainer.TrainConfig(ablation=ablation, **values)
    if seed_override is not None:
        config = dataclasses.replace(config, seed=seed_override)
    return config


def _config_dict(config: trainer.TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    out["ablation"]["ops"] = sorted(config.ablation.ops)
    return out


# ---------------------------------------------------------------------------
# output directories
# ---------------------------------------------------------------------------


class _Outputs:
    """Tracks artifacts in --out so a failed command leaves no partial files."""

    def __init__(self, out_dir: str):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def path(self, name: str) -> str:
        self.artifacts.append(name)
        return str(self.dir / name)

    def discard(self) -> None:
        for name in self.artifacts:
            (self.dir / name).unlink(missing_ok=True)

    def write_json(self, name: str, payload: dict) -> None:
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_manifest(self, command: str, config: dict) -> None:
        manifest = {
            "command": command,
            "config": config,
            "artifacts": sorted(self.artifacts),
        }
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_with_outputs(args, command: str, config: dict, work) -> int:
    outputs = _Outputs(args.out)
    try:
        work(outputs)
    except BaseException:
        outputs.discard()
        raise
    outputs.write_manifest(command, config)
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------


def _load_dataset(args) -> trainer.Dataset:
    queries = data_io.load_queries(args.queries)
    documents = data_io.load_corpus(args.corpus)
    run = data_io.load_run(args.run)
    qrels = data_io.qrels_by_query(data_io.load_qrels(args.qrels)) if getattr(args, "qrels", None) else {}
    return trainer.make_dataset(queries, documents, run, qrels)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    violations: list[str] = []
    queries = documents = None
    try:
        queries = data_io.load_queries(args.queries)
    except DataFormatError as exc:
        violations.append(str(exc))
    try:
        documents = data_io.load_corpus(args.corpus)
    except DataFormatError as exc:
        violations.append(str(exc))
    if documents is not None and args.max_seq_len is not None:
        for doc_id in sorted(documents):
            for issue in validate_record(documents[doc_id], max_seq_len=args.max_seq_len):
                violations.append(f"{args.corpus}: {doc_id}: {issue}")
    run = None
    if args.run:
        try:
            run = data_io.load_run(args.run)
        except DataFormatError as exc:
            violations.append(str(exc))
        if run is not None and queries is not None and documents is not None:
            for qid in sorted(run):
                if qid not in queries:
                    violations.append(f"{args.run}: unknown query {qid!r}")
                for cand in run[qid]:
                    if cand.doc_id not in documents:
                        violations.append(
                            f"{args.run}: query {qid!r} references unknown document {cand.doc_id!r}"
                        )
    if args.qrels:
        try:
            qrels = data_io.load_qrels(args.qrels)
        except DataFormatError as exc:
            violations.append(str(exc))
        else:
            if documents is not None:
                for entry in qrels:
                    if entry.doc_id not in documents:
                        violations.append(
                            f"{args.qrels}: judgment for unknown document {entry.doc_id!r}"
                        )
    for line in violations:
        print(line, file=sys.stderr)
    n_queries = len(queries) if queries else 0
    n_docs = len(documents) if documents else 0
    print(f"{n_queries} queries, {n_docs} documents, {len(violations)} violations")
    return EXIT_DATA if violations else EXIT_OK


def cmd_synth(args) -> int:
    spec = (
        synthetic.SyntheticSpec.small(seed=args.seed)
        if args.small
        else synthetic.SyntheticSpec(
            n_queries=args.queries,
            n_candidates=args.candidates,
            seed=args.seed,
        )
    )
    data = synthetic.generate(spec)
    config = dataclasses.asdict(spec)

    def work(outputs: _Outputs):
        suffix = "ndjson" if args.format == "ndjson" else "bin"
        query_records = [data.queries[qid] for qid in sorted(data.queries)]
        doc_records = [data.documents[did] for did in sorted(data.documents)]
        if args.format == "ndjson":
            data_io.write_corpus_ndjson(query_records, outputs.path(f"queries.{suffix}"))
            data_io.write_corpus_ndjson(doc_records, outputs.path(f"corpus.{suffix}"))
        else:
            data_io.write_corpus_packed(query_records, outputs.path(f"queries.{suffix}"))
            data_io.write_corpus_packed(doc_records, outputs.path(f"corpus.{suffix}"))
        rankings = {
            qid: [(c.doc_id, c.score) for c in cands] for qid, cands in data.run.items()
        }
        data_io.write_run(rankings, "first-stage", outputs.path("run.txt"))
        data_io.write_qrels(data.qrels, outputs.path("qrels.txt"))

    return _run_with_outputs(args, "synth", config, work)


def cmd_train(args) -> int:
    config = build_train_config(args.config, args.seed)
    dataset = _load_dataset(args)

    def work(outputs: _Outputs):
        result = trainer.cross_validate(dataset, config, threads=args.threads)
        data_io.write_run(result.oof_rankings, args.tag, outputs.path("run.txt"))
        for fold in result.folds:
            save_model(fold.model, outputs.path(f"checkpoint_fold{fold.split.index}.bin"))
        with open(outputs.path("epochs.ndjson"), "w", encoding="utf-8") as fh:
            for entry in result.epoch_logs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        outputs.write_json(
            "folds.json",
            {
                "folds": config.folds,
                "seed": config.seed,
                "assignment": {qid: result.fold_of[qid] for qid in sorted(result.fold_of)},
                "splits": [
                    {
                        "index": fold.split.index,
                        "train": list(fold.split.train),
                        "validation": list(fold.split.validation),
                        "test": list(fold.split.test),
                        "best_epoch": fold.best_epoch,
                        "best_val_map": fold.best_val_map,
                    }
                    for fold in result.folds
                ],
            },
        )

    return _run_with_outputs(args, "train", _config_dict(config), work)


def cmd_rerank(args) -> int:
    model = load_model(args.model)
    queries = data_io.load_queries(args.queries)
    documents = data_io.load_corpus(args.corpus)
    run = data_io.load_run(args.run)
    dataset = trainer.make_dataset(queries, documents, run, {})

    def work(outputs: _Outputs):
        qids = sorted(dataset.run)
        if args.dump_attention:
            rankings = {}
            with open(outputs.path("attention.ndjson"), "w", encoding="utf-8") as fh:
                for qid in qids:
                    scored = []
                    for cand in dataset.run[qid]:
                        doc = dataset.documents[cand.doc_id]
                        breakdown = forward(
                            model, dataset.queries[qid], doc, cand.score, capture_attention=True
                        )
                        scored.append((cand.doc_id, breakdown.prob))
                        att = breakdown.features.attention or {}
                        entity = att.get("entity")
                        record = {
                            "query_id": qid,
                            "doc_id": cand.doc_id,
                            "text": att.get("text").tolist() if att.get("text") is not None else None,
                            "entity": entity.tolist() if entity is not None else None,
                            "entity_ids": list(doc.entities.entity_ids),
                        }
                        fh.write(json.dumps(record, sort_keys=True) + "\n")
                    scored.sort(key=lambda pair: (-pair[1], pair[0]))
                    rankings[qid] = scored
        else:
            cache = None if model.adapter is not None else trainer.FeatureCache(dataset, model.config)
            rankings = trainer.rank_queries(model, dataset, qids, cache, threads=args.threads)
        data_io.write_run(rankings, args.tag, outputs.path("run.txt"))

    return _run_with_outputs(args, "rerank", {"model": args.model, "tag": args.tag}, work)


def cmd_fuse(args) -> int:
    run_a = data_io.run_to_rankings(data_io.load_run(args.run_a))
    run_b = data_io.run_to_rankings(data_io.load_run(args.run_b))
    if args.fit or args.cv:
        if not args.qrels:
            raise DataFormatError("fitting the mixing weight requires --qrels")
    if args.cv and not args.folds_json:
        raise DataFormatError("--cv requires --folds-json from a training run")
    qrels = (
        data_io.qrels_by_query(data_io.load_qrels(args.qrels)) if args.qrels else {}
    )
    config: dict = {"step": args.step}

    def work(outputs: _Outputs):
        if args.cv:
            with open(args.folds_json, "r", encoding="utf-8") as fh:
                folds_payload = json.load(fh)
            fold_of = {qid: int(f) for qid, f in folds_payload["assignment"].items()}
            fit = hybrid.fit_lambda_cv(run_a, run_b, qrels, fold_of, step=args.step)
            fused = fit.rankings
            config["lambda_by_fold"] = fit.lambda_by_fold
            config["map"] = fit.map_score
        elif args.fit:
            fit = hybrid.fit_lambda(run_a, run_b, qrels, step=args.step)
            fused = hybrid.interpolate(
                hybrid.normalize_per_query(run_a), hybrid.normalize_per_query(run_b), fit.lam
            )
            config["lam"] = fit.lam
            config["map"] = fit.map_score
        else:
            fused = hybrid.interpolate(
                hybrid.normalize_per_query(run_a),
                hybrid.normalize_per_query(run_b),
                args.lam,
            )
            config["lam"] = args.lam
        data_io.write_run(fused, args.tag, outputs.path("run.txt"))
        outputs.write_json("fusion.json", config)

    return _run_with_outputs(args, "fuse", config, work)


def cmd_eval(args) -> int:
    run = data_io.load_run(args.run)
    qrels = data_io.qrels_by_query(data_io.load_qrels(args.qrels))
    report = evaluation.evaluate_run(run, qrels, ndcg_k=args.ndcg_k, p_k=args.p_k)
    payload = report.to_dict()
    if args.baseline:
        baseline_run = data_io.load_run(args.baseline)
        baseline = evaluation.evaluate_run(baseline_run, qrels, ndcg_k=args.ndcg_k, p_k=args.p_k)
        significance = {}
        for metric, values in report.per_query.items():
            test = evaluation.paired_t_test(values, baseline.per_query[metric])
            significance[metric] = {
                "t": test.t_statistic,
                "p": test.p_value,
                "mean_difference": test.mean_difference,
                "n": test.n,
                "zero_variance": test.zero_variance,
            }
        bin_metric = f"ndcg@{args.ndcg_k}"
        bins = evaluation.difficulty_bins(
            baseline.per_query[bin_metric], report.per_query[bin_metric]
        )
        payload["significance"] = significance
        payload["baseline_means"] = baseline.means
        payload["difficulty_bins"] = [
            {
                "label": b.label,
                "n": len(b.query_ids),
                "baseline_mean": b.baseline_mean,
                "treatment_mean": b.treatment_mean,
                "delta": b.delta,
            }
            for b in bins
        ]
        payload["rank_shift"] = evaluation.rank_shift_report(baseline_run, run, qrels).to_dict()
    if args.out:
        config = {"run": args.run, "qrels": args.qrels, "ndcg_k": args.ndcg_k, "p_k": args.p_k}
        return _run_with_outputs(
            args, "eval", config, lambda outputs: outputs.write_json("eval.json", payload)
        )
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = build_train_config(args.config, args.seed)
    dataset = _load_dataset(args)
    names = [n.strip() for n in args.names.split(",")] if args.names else None

    def work(outputs: _Outputs):
        outcomes = diagnostics.ablation_suite(dataset, config, names, threads=args.threads)
        outputs.write_json(
            "ablation.json",
            {name: {"map": outcome.map_score} for name, outcome in outcomes.items()},
        )

    return _run_with_outputs(args, "ablate", _config_dict(config), work)


def cmd_noise(args) -> int:
    sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else list(
        diagnostics.DEFAULT_SIGMAS
    )
    model = load_model(args.model) if args.model else None
    report = diagnostics.noise_sensitivity(
        sigmas=sigmas, trials=args.trials, seed=args.seed, model=model, op=args.op
    )
    payload = report.to_dict()
    if args.out:
        config = {"sigmas": sigmas, "trials": args.trials, "seed": args.seed, "op": args.op}
        return _run_with_outputs(
            args, "noise", config, lambda outputs: outputs.write_json("noise.json", payload)
        )
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    print()
    return EXIT_OK


def cmd_cluster(args) -> int:
    dataset = _load_dataset(args)
    config = AblationConfig()

    def work(outputs: _Outputs):
        payload = {"label_scheme": args.labels}
        for mode in diagnostics.DUMP_MODES:
            dump = diagnostics.embedding_dump(dataset, config, mode, args.labels)
            payload[mode] = diagnostics.clustering_metrics(dump.points, dump.labels).to_dict()
        outputs.write_json("cluster.json", payload)

    return _run_with_outputs(args, "cluster", {"labels": args.labels}, work)


# ---------------------------------------------------------------------------
# the parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qder", description="entity-aware neural re-ranking toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check data files for violations")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run")
    p.add_argument("--qrels")
    p.add_argument("--max-seq-len", type=int, default=512)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="generate a synthetic collection")
    p.add_argument("--out", required=True)
    p.add_argument("--queries", type=int, default=40)
    p.add_argument("--candidates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("ndjson", "packed"), default="ndjson")
    p.add_argument("--small", action="store_true", help="fast 10-query variant")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tag", default="qder")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="apply a checkpoint to a run")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default="qder")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-attention", action="store_true")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("fuse", help="interpolate two runs")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--fit", action="store_true", help="grid-search the weight")
    p.add_argument("--cv", action="store_true", help="fit per fold from --folds-json")
    p.add_argument("--folds-json")
    p.add_argument("--qrels")
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--tag", default="qder-hybrid")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a run against judgments")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--baseline", help="second run for significance and bins")
    p.add_argument("--ndcg-k", type=int, default=20)
    p.add_argument("--p-k", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation suite")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--names", help="comma-separated variant subset")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("noise", help="input-noise sensitivity analysis")
    p.add_argument("--sigmas", help="comma-separated noise levels")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", choices=sorted(CANONICAL_OPS), help="measure one operation's blocks only")
    p.add_argument("--model", help="checkpoint for the ranking stability probe")
    p.add_argument("--out")
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("cluster", help="feature-space clustering quality")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--labels", choices=diagnostics.LABEL_SCHEMES, default="relevance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except QderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
