import csv
import json

import pytest

from leakseg import cli
from leakseg.hierarchy import load_hierarchy
from leakseg.synthdata import load


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "families": [2, 2],
        "scenes": 9,
        "points_per_scene": 120,
        "class_frequency": [0.4, 0.2, 0.3, 0.1],
        "confusability": 0.5,
        "seed": 1,
        "splits": [0.4, 0.3, 0.3],
    }
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "cfg.txt").write_text("epochs = 2\nbatch_size = 1\nweighting = \"sqrt\"\n")
    return root


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline_dir(tiny):
    out = tiny / "work"
    assert run("pipeline", "--spec", tiny / "spec.json", "--config", tiny / "cfg.txt", "--out", out, "--seed", 3) == 0
    return out


class TestCommands:
    def test_gen_data(self, tiny):
        out = tiny / "data"
        assert run("gen-data", "--spec", tiny / "spec.json", "--out", out) == 0
        sizes = [len(load(out / f"{s}.leak")) for s in ("train", "val", "test")]
        assert sizes == [3, 3, 3]  # largest remainder on 3.6, 2.7, 2.7
        assert json.loads((out / "catalog.json").read_text())["planted_macro"] == [0, 0, 1, 1]

    def test_gen_data_idempotent(self, tiny):
        a, b = tiny / "ga", tiny / "gb"
        run("gen-data", "--spec", tiny / "spec.json", "--out", a, "--seed", 5)
        run("gen-data", "--spec", tiny / "spec.json", "--out", b, "--seed", 5)
        for s in ("train", "val", "test"):
            assert (a / f"{s}.leak").read_bytes() == (b / f"{s}.leak").read_bytes()

    def test_pipeline_artifacts(self, pipeline_dir):
        man = json.loads((pipeline_dir / "manifest.json").read_text())
        assert all(man["done"].values())
        for rel in ("baseline/last.leakw", "baseline/log.jsonl", "cluster/hierarchy.json", "cluster/confusion.csv",
                    "leak/last.leakw", "leak/log.jsonl", "report/report.csv", "report/report.txt",
                    "report/curves.csv"):
            assert (pipeline_dir / rel).exists(), rel
        with open(pipeline_dir / "report" / "report.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["metric", "baseline", "leak", "delta"]
        assert rows[1][0] == "miou"

    def test_eval_writes_report(self, pipeline_dir, tmp_path):
        rc = run("eval", "--checkpoint", pipeline_dir / "leak" / "last.leakw", "--data",
                 pipeline_dir / "data" / "test.leak", "--hierarchy", pipeline_dir / "cluster" / "hierarchy.json",
                 "--out", tmp_path)
        assert rc == 0
        rep = json.loads((tmp_path / "metrics.json").read_text())
        assert 0 <= rep["miou"] <= 1 and rep["hiou"] is not None and rep["ccd"] is not None

    def test_report_identical_logs_zero_delta(self, pipeline_dir, tmp_path):
        log = pipeline_dir / "baseline" / "log.jsonl"
        assert run("report", "--baseline", log, "--leak", log, "--out", tmp_path) == 0
        with open(tmp_path / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert all(r["delta"] in ("", "0.0") for r in rows)
        assert any(r["delta"] == "0.0" for r in rows)

    def test_cluster_idempotent(self, pipeline_dir, tmp_path):
        args = ["cluster", "--checkpoint", pipeline_dir / "baseline" / "last.leakw",
                "--val", pipeline_dir / "data" / "val.leak", "--seed", 3]
        run(*args, "--out", tmp_path / "a")
        run(*args, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "hierarchy.json").read_text() == (tmp_path / "b" / "hierarchy.json").read_text()
        assert load_hierarchy(tmp_path / "a" / "hierarchy.json").m == 4

    def test_lambda_flags_override(self, pipeline_dir, tiny, tmp_path):
        rc = run("train", "--data", pipeline_dir / "data", "--hierarchy", pipeline_dir / "cluster" / "hierarchy.json",
                 "--config", tiny / "cfg.txt", "--lambda-f", 0, "--lambda-pm", 0.5, "--lambda-pM", 0, "--out", tmp_path)
        assert rc == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert (cfg["lambda_f"], cfg["lambda_pm"], cfg["lambda_pM"], cfg["epochs"]) == (0, 0.5, 0, 2)


class TestErrors:
    def test_train_without_data_names_gen_data(self, tmp_path, capsys):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
        assert "leakseg gen-data" in capsys.readouterr().err

    def test_cluster_without_checkpoint_names_train(self, tmp_path, capsys):
        assert run("cluster", "--checkpoint", tmp_path / "x.leakw", "--val", tmp_path / "v.leak", "--out", tmp_path) == 1
        assert "leakseg train" in capsys.readouterr().err

    def test_leak_without_hierarchy_names_cluster(self, pipeline_dir, tmp_path, capsys):
        rc = run("train", "--data", pipeline_dir / "data", "--hierarchy", tmp_path / "h.json", "--out", tmp_path)
        assert rc == 1
        assert "leakseg cluster" in capsys.readouterr().err

    def test_corrupt_dataset(self, tmp_path, capsys):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "train.leak").write_bytes(b"LEAK1\x01\x00\x00\x00\x05\x00\x00\x00")
        (tmp_path / "d" / "val.leak").write_bytes(b"")
        assert run("train", "--data", tmp_path / "d", "--out", tmp_path / "o") == 1
        assert "byte offset" in capsys.readouterr().err

    def test_manifest_phase_order(self, tmp_path):
        man = cli.ExperimentManifest(str(tmp_path))
        with pytest.raises(cli.PrerequisiteError, match="gen-data"):
            man.mark("cluster")
        man.mark("gen-data")
        man.mark("train-baseline")
        man.mark("cluster")
        man.mark("gen-data")  # redoing a phase invalidates later ones
        assert not man.done["cluster"]
