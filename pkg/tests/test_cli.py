import json
import shutil
import subprocess
from pathlib import Path

import pytest

from qder import data_io
from qder.cli import main
from qder.interaction import load_model

TRAIN_CONFIG = (
    "# small but real training run\n"
    "epochs = 2\n"
    "folds = 3\n"
    "learning_rate = 0.3\n"
    "warmup_steps = 5\n"
)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--small", "--seed", "3"]) == 0
    config = root / "train.cfg"
    config.write_text(TRAIN_CONFIG, encoding="utf-8")
    return root


def _data_args(root):
    data = root / "data"
    return [
        "--queries", str(data / "queries.ndjson"),
        "--corpus", str(data / "corpus.ndjson"),
        "--run", str(data / "run.txt"),
        "--qrels", str(data / "qrels.txt"),
    ]


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "model"
    code = main(
        ["train", *_data_args(workdir), "--out", str(out), "--config", str(workdir / "train.cfg")]
    )
    assert code == 0
    return out


class TestSynth:
    def test_artifacts_and_manifest(self, workdir):
        data = workdir / "data"
        names = {"queries.ndjson", "corpus.ndjson", "run.txt", "qrels.txt"}
        for name in names:
            assert (data / name).is_file()
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert set(manifest["artifacts"]) == names
        assert manifest["config"]["seed"] == 3

    def test_outputs_are_loadable(self, workdir):
        data = workdir / "data"
        queries = data_io.load_queries(str(data / "queries.ndjson"))
        docs = data_io.load_corpus(str(data / "corpus.ndjson"))
        run = data_io.load_run(str(data / "run.txt"))
        assert len(queries) == 10
        assert set(run) <= set(queries)
        assert all(c.doc_id in docs for cands in run.values() for c in cands)

    def test_packed_format_matches_ndjson(self, workdir, tmp_path):
        packed = tmp_path / "packed"
        assert main(
            ["synth", "--out", str(packed), "--small", "--seed", "3", "--format", "packed"]
        ) == 0
        docs_a = data_io.load_corpus(str(workdir / "data" / "corpus.ndjson"))
        docs_b = data_io.load_corpus(str(packed / "corpus.bin"))
        assert set(docs_a) == set(docs_b)
        some = sorted(docs_a)[0]
        assert docs_a[some].tokens.values.shape == docs_b[some].tokens.values.shape


class TestValidate:
    def test_clean_data_passes(self, workdir, capsys):
        code = main(["validate", *_data_args(workdir)])
        out = capsys.readouterr().out
        assert code == 0
        assert "0 violations" in out

    def test_corrupt_corpus_fails(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        bad = tmp_path / "corpus.ndjson"
        lines = (data / "corpus.ndjson").read_text().splitlines(True)
        bad.write_text("".join(lines[:3]) + "{not json\n", encoding="utf-8")
        code = main(
            [
                "validate",
                "--queries", str(data / "queries.ndjson"),
                "--corpus", str(bad),
            ]
        )
        captured = capsys.readouterr()
        assert code == 1
        assert f"{bad}:4:" in captured.err
        assert "1 violations" in captured.out

    def test_run_referencing_unknown_document(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        bad_run = tmp_path / "run.txt"
        bad_run.write_text("Q000 Q0 GHOST 1 10.0 tag\n", encoding="utf-8")
        code = main(
            [
                "validate",
                "--queries", str(data / "queries.ndjson"),
                "--corpus", str(data / "corpus.ndjson"),
                "--run", str(bad_run),
            ]
        )
        assert code == 1
        assert "GHOST" in capsys.readouterr().err

    def test_missing_file_is_io_error(self, workdir):
        code = main(
            [
                "validate",
                "--queries", "/nonexistent/queries.ndjson",
                "--corpus", "/nonexistent/corpus.ndjson",
            ]
        )
        assert code == 2

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2


class TestTrain:
    def test_artifacts(self, workdir, trained):
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert "run.txt" in manifest["artifacts"]
        assert "folds.json" in manifest["artifacts"]
        assert "epochs.ndjson" in manifest["artifacts"]
        assert manifest["config"]["epochs"] == 2
        assert manifest["config"]["folds"] == 3

    def test_folds_json_structure(self, workdir, trained):
        payload = json.loads((trained / "folds.json").read_text())
        assert payload["folds"] == 3
        assert len(payload["splits"]) == 3
        assert sorted(payload["assignment"].values()) == sorted(
            s["index"] for s in payload["splits"] for _ in s["test"]
        )
        for split in payload["splits"]:
            assert set(split) >= {"index", "train", "validation", "test", "best_epoch"}
            assert not (set(split["train"]) & set(split["test"]))

    def test_checkpoints_load(self, workdir, trained):
        for i in range(3):
            model = load_model(str(trained / f"checkpoint_fold{i}.bin"))
            assert model.d_t == 8 and model.d_e == 4

    def test_epoch_log_lines(self, workdir, trained):
        lines = (trained / "epochs.ndjson").read_text().splitlines()
        entries = [json.loads(line) for line in lines]
        assert len(entries) == 6
        assert {e["fold"] for e in entries} == {0, 1, 2}
        for entry in entries:
            assert set(entry) >= {"fold", "epoch", "train_loss", "val_map", "kept"}

    def test_rerun_is_byte_identical(self, workdir, trained, tmp_path):
        again = tmp_path / "model2"
        code = main(
            [
                "train", *_data_args(workdir),
                "--out", str(again),
                "--config", str(workdir / "train.cfg"),
            ]
        )
        assert code == 0
        for name in ["run.txt", "folds.json", "epochs.ndjson", "checkpoint_fold0.bin"]:
            assert (again / name).read_bytes() == (trained / name).read_bytes()

    def test_failure_leaves_no_artifacts(self, workdir, tmp_path):
        config = tmp_path / "bad.cfg"
        config.write_text("folds = 50\n", encoding="utf-8")
        out = tmp_path / "out"
        code = main(
            ["train", *_data_args(workdir), "--out", str(out), "--config", str(config)]
        )
        assert code == 1
        assert not (out / "manifest.json").exists()
        assert list(out.iterdir()) == []

    def test_unknown_config_key(self, workdir, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("momentum = 0.9\n", encoding="utf-8")
        code = main(
            ["train", *_data_args(workdir), "--out", str(tmp_path / "x"), "--config", str(config)]
        )
        assert code == 1
        assert "momentum" in capsys.readouterr().err

    def test_bad_config_value(self, workdir, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("epochs = soon\n", encoding="utf-8")
        code = main(
            ["train", *_data_args(workdir), "--out", str(tmp_path / "x"), "--config", str(config)]
        )
        assert code == 1
        assert "epochs" in capsys.readouterr().err


class TestRerank:
    def test_scores_and_coverage(self, workdir, trained, tmp_path):
        out = tmp_path / "rerank"
        code = main(
            [
                "rerank",
                "--queries", str(workdir / "data" / "queries.ndjson"),
                "--corpus", str(workdir / "data" / "corpus.ndjson"),
                "--run", str(workdir / "data" / "run.txt"),
                "--model", str(trained / "checkpoint_fold0.bin"),
                "--out", str(out),
            ]
        )
        assert code == 0
        before = data_io.load_run(str(workdir / "data" / "run.txt"))
        after = data_io.load_run(str(out / "run.txt"))
        assert set(after) == set(before)
        for qid, cands in after.items():
            assert {c.doc_id for c in cands} == {c.doc_id for c in before[qid]}
            assert all(0.0 <= c.score <= 1.0 for c in cands)

    def test_attention_dump(self, workdir, trained, tmp_path):
        out = tmp_path / "rerank_att"
        code = main(
            [
                "rerank",
                "--queries", str(workdir / "data" / "queries.ndjson"),
                "--corpus", str(workdir / "data" / "corpus.ndjson"),
                "--run", str(workdir / "data" / "run.txt"),
                "--model", str(trained / "checkpoint_fold0.bin"),
                "--out", str(out),
                "--dump-attention",
            ]
        )
        assert code == 0
        lines = (out / "attention.ndjson").read_text().splitlines()
        run = data_io.load_run(str(workdir / "data" / "run.txt"))
        assert len(lines) == sum(len(c) for c in run.values())
        saw_entity_free = False
        for line in lines:
            record = json.loads(line)
            assert set(record) == {"query_id", "doc_id", "text", "entity", "entity_ids"}
            for row in record["text"]:
                assert sum(row) == pytest.approx(1.0, abs=1e-9)
            if record["entity"] is None:
                saw_entity_free = True
                assert record["entity_ids"] == []
        assert saw_entity_free

    def test_dump_matches_plain_scores(self, workdir, trained, tmp_path):
        args = [
            "rerank",
            "--queries", str(workdir / "data" / "queries.ndjson"),
            "--corpus", str(workdir / "data" / "corpus.ndjson"),
            "--run", str(workdir / "data" / "run.txt"),
            "--model", str(trained / "checkpoint_fold0.bin"),
        ]
        plain = tmp_path / "plain"
        dumped = tmp_path / "dumped"
        assert main(args + ["--out", str(plain)]) == 0
        assert main(args + ["--out", str(dumped), "--dump-attention"]) == 0
        assert (plain / "run.txt").read_bytes() == (dumped / "run.txt").read_bytes()


class TestFuse:
    def test_fixed_lambda(self, workdir, trained, tmp_path):
        out = tmp_path / "fuse"
        code = main(
            [
                "fuse",
                "--run-a", str(workdir / "data" / "run.txt"),
                "--run-b", str(trained / "run.txt"),
                "--out", str(out),
                "--lam", "0.3",
            ]
        )
        assert code == 0
        fusion = json.loads((out / "fusion.json").read_text())
        assert fusion["lam"] == 0.3
        assert data_io.load_run(str(out / "run.txt"))

    def test_fit_lambda(self, workdir, trained, tmp_path):
        out = tmp_path / "fuse_fit"
        code = main(
            [
                "fuse",
                "--run-a", str(workdir / "data" / "run.txt"),
                "--run-b", str(trained / "run.txt"),
                "--qrels", str(workdir / "data" / "qrels.txt"),
                "--out", str(out),
                "--fit",
            ]
        )
        assert code == 0
        fusion = json.loads((out / "fusion.json").read_text())
        assert 0.0 <= fusion["lam"] <= 1.0
        assert 0.0 <= fusion["map"] <= 1.0

    def test_cv_lambda(self, workdir, trained, tmp_path):
        out = tmp_path / "fuse_cv"
        code = main(
            [
                "fuse",
                "--run-a", str(workdir / "data" / "run.txt"),
                "--run-b", str(trained / "run.txt"),
                "--qrels", str(workdir / "data" / "qrels.txt"),
                "--folds-json", str(trained / "folds.json"),
                "--out", str(out),
                "--cv",
            ]
        )
        assert code == 0
        fusion = json.loads((out / "fusion.json").read_text())
        assert set(fusion["lambda_by_fold"]) == {"0", "1", "2"}

    def test_cv_without_folds_json_fails(self, workdir, trained, tmp_path, capsys):
        code = main(
            [
                "fuse",
                "--run-a", str(workdir / "data" / "run.txt"),
                "--run-b", str(trained / "run.txt"),
                "--qrels", str(workdir / "data" / "qrels.txt"),
                "--out", str(tmp_path / "x"),
                "--cv",
            ]
        )
        assert code == 1
        assert "folds-json" in capsys.readouterr().err

    def test_fit_without_qrels_fails(self, workdir, trained, tmp_path):
        code = main(
            [
                "fuse",
                "--run-a", str(workdir / "data" / "run.txt"),
                "--run-b", str(trained / "run.txt"),
                "--out", str(tmp_path / "x"),
                "--fit",
            ]
        )
        assert code == 1


class TestEval:
    def test_stdout_report(self, workdir, trained, capsys):
        code = main(
            [
                "eval",
                "--run", str(trained / "run.txt"),
                "--qrels", str(workdir / "data" / "qrels.txt"),
            ]
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload["means"]) == {"map", "ndcg@20", "p@20", "mrr"}
        assert 0.0 <= payload["means"]["map"] <= 1.0

    def test_baseline_comparison(self, workdir, trained, tmp_path):
        out = tmp_path / "eval"
        code = main(
            [
                "eval",
                "--run", str(trained / "run.txt"),
                "--qrels", str(workdir / "data" / "qrels.txt"),
                "--baseline", str(workdir / "data" / "run.txt"),
                "--out", str(out),
            ]
        )
        assert code == 0
        payload = json.loads((out / "eval.json").read_text())
        assert set(payload["significance"]) == {"map", "ndcg@20", "p@20", "mrr"}
        for test in payload["significance"].values():
            assert 0.0 <= test["p"] <= 1.0
        assert [b["label"] for b in payload["difficulty_bins"]][-1] == "95-100"
        assert payload["rank_shift"]


class TestAnalysisCommands:
    def test_noise_zero_sigma(self, capsys):
        code = main(["noise", "--sigmas", "0.0", "--trials", "2"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        level = payload["levels"][0]
        assert level["mean_angle_deg"] == 0.0
        assert level["mean_amplification"] == 0.0
        assert level["mean_rank_tau"] == 1.0

    def test_cluster_report(self, workdir, tmp_path):
        out = tmp_path / "cluster"
        code = main(["cluster", *_data_args(workdir), "--out", str(out)])
        assert code == 0
        payload = json.loads((out / "cluster.json").read_text())
        for mode in ("query_specific", "static_pool"):
            assert {"davies_bouldin", "silhouette", "calinski_harabasz"} <= set(payload[mode])
        assert payload["query_specific"]["silhouette"] > payload["static_pool"]["silhouette"]

    def test_ablate_subset(self, workdir, tmp_path):
        out = tmp_path / "ablate"
        config = tmp_path / "fast.cfg"
        config.write_text("epochs = 1\nfolds = 3\nlearning_rate = 0.3\nwarmup_steps = 5\n")
        code = main(
            [
                "ablate", *_data_args(workdir),
                "--out", str(out),
                "--config", str(config),
                "--names", "all-interactions,no-interactions",
            ]
        )
        assert code == 0
        payload = json.loads((out / "ablation.json").read_text())
        assert set(payload) == {"all-interactions", "no-interactions"}

    def test_ablate_unknown_name(self, workdir, tmp_path):
        code = main(
            ["ablate", *_data_args(workdir), "--out", str(tmp_path / "x"), "--names", "bogus"]
        )
        assert code == 1


class TestConsoleScript:
    def test_entry_point_installed(self):
        exe = shutil.which("qder")
        assert exe, "console script missing"
        result = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert result.returncode == 0
        assert "rerank" in result.stdout
