import json
import shutil
import subprocess

import pytest

from ptrag import cli
from ptrag.metrics import MetricsReport
from ptrag.nn import load_checkpoint

DATA = {"G": 12, "E": 8, "P": 24, "C": 3, "m": 4, "S": 6, "seed": 3, "target_cell_type": "T2",
        "split_seed": 1}
TRAIN = {"max_steps": 6, "validate_every": 3, "batch_size": 4, "K": 4, "d": 8, "depth": 1,
         "heads": 2, "score_hidden": 8, "proj_hidden": 8, "train_probe": 8}


def _config(tmp_path, name="cfg.json", **sections):
    raw = {"schema_version": 1, "data": DATA, "train": TRAIN, **sections}
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return str(path)


def _run(*argv):
    return cli.main([str(a) for a in argv])


class TestValidation:
    def test_negative_learning_rate(self, tmp_path, capsys):
        cfg = _config(tmp_path, train={**TRAIN, "lr": -1.0})
        assert _run("train", "--config", cfg, "--out", tmp_path / "run") == 2
        err = capsys.readouterr().err
        assert "train.lr" in err and "lr > 0" in err
        assert not (tmp_path / "run").exists()

    @pytest.mark.parametrize("sections,key", [
        ({"train": {"bogus": 1}}, "train.bogus"),
        ({"data": {"G": "many"}}, "data.G"),
        ({"data": {**DATA, "m": 20}}, "data.m"),
        ({"train": {**TRAIN, "validate_every": 100}}, "validate_every"),
        ({"extra": 1}, "extra"),
    ])
    def test_offending_key_named(self, tmp_path, capsys, sections, key):
        cfg = _config(tmp_path, **sections)
        assert _run("train", "--config", cfg, "--out", tmp_path / "run") == 2
        assert key in capsys.readouterr().err

    def test_schema_version_required(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": TRAIN}))
        assert _run("train", "--config", path, "--out", tmp_path / "run") == 2
        assert "schema_version" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert _run("train", "--config", path, "--out", tmp_path / "run") == 2

    def test_missing_config(self, tmp_path):
        assert _run("gen", "--config", tmp_path / "nope.json", "--out", tmp_path / "d") == 2

    def test_usage_errors(self, tmp_path):
        assert _run() == 2
        assert _run("train") == 2
        assert _run("report") == 2


class TestGen:
    def test_reproducible_checksums(self, tmp_path):
        cfg = _config(tmp_path)
        assert _run("gen", "--config", cfg, "--out", tmp_path / "a") == 0
        assert _run("gen", "--config", cfg, "--out", tmp_path / "b") == 0
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert a["checksums"] == b["checksums"]
        assert _run("gen", "--config", cfg, "--out", tmp_path / "c", "--seed", 9) == 0
        c = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert c["checksums"] != a["checksums"] and c["config"]["seed"] == 9

    def test_refuses_overwrite(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        out = tmp_path / "a"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert _run("gen", "--config", cfg, "--out", out) == 2
        assert "--force" in capsys.readouterr().err
        assert (out / "keep.txt").exists()
        assert _run("gen", "--config", cfg, "--out", out, "--force") == 0
        assert not (out / "keep.txt").exists() and (out / "manifest.json").exists()

    def test_default_config(self, tmp_path):
        assert _run("gen", "--out", tmp_path / "d", "--quiet") == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["config"]["P"] == 120 and manifest["split"]["target_cell_type"] == "T3"


class TestAtomicity:
    def test_failure_leaves_nothing(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **kw):
            raise FloatingPointError("non-finite loss at step 3")

        monkeypatch.setattr(cli, "train", boom)
        cfg = _config(tmp_path)
        assert _run("train", "--config", cfg, "--out", tmp_path / "run") == 1
        assert "non-finite loss at step 3" in capsys.readouterr().err
        assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json"]

    def test_failure_keeps_previous_output(self, tmp_path, monkeypatch):
        cfg = _config(tmp_path)
        assert _run("gen", "--config", cfg, "--out", tmp_path / "d") == 0
        before = (tmp_path / "d" / "manifest.json").read_text()
        monkeypatch.setattr(cli, "write_dataset", lambda *a, **kw: 1 / 0)
        assert _run("gen", "--config", cfg, "--out", tmp_path / "d", "--force") == 1
        assert (tmp_path / "d" / "manifest.json").read_text() == before


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = _config(tmp)
    assert _run("train", "--config", cfg, "--out", tmp / "run", "--quiet") == 0
    return tmp, cfg


class TestTrainEval:
    def test_artifacts(self, trained):
        tmp, _ = trained
        run = tmp / "run"
        assert {p.name for p in run.iterdir()} == {"config.json", "checkpoint.bin", "metrics.json", "run.json"}

    def test_config_round_trip(self, trained):
        tmp, _ = trained
        saved = json.loads((tmp / "run" / "config.json").read_text())
        cfg = cli.parse_train("train", saved["train"])
        assert cfg == cli.parse_train("train", TRAIN)

    def test_metrics_round_trip(self, trained):
        tmp, _ = trained
        d = json.loads((tmp / "run" / "metrics.json").read_text())
        assert MetricsReport.from_dict(d).to_dict() == d

    def test_checkpoint_readable(self, trained):
        tmp, _ = trained
        params, meta = load_checkpoint(tmp / "run" / "checkpoint.bin")
        assert meta["n_genes"] == 12 and len(params) > 0

    def test_eval_reproduces_training_metrics(self, trained):
        tmp, cfg = trained
        assert _run("eval", "--config", cfg, "--checkpoint", tmp / "run", "--out", tmp / "ev") == 0
        assert (tmp / "ev" / "metrics.json").read_bytes() == (tmp / "run" / "metrics.json").read_bytes()

    def test_eval_missing_checkpoint(self, trained, capsys):
        tmp, cfg = trained
        assert _run("eval", "--config", cfg, "--checkpoint", tmp / "nowhere", "--out", tmp / "ev2") == 1
        assert "nowhere" in capsys.readouterr().err

    def test_bitwise_rerun(self, trained):
        tmp, cfg = trained
        assert _run("train", "--config", cfg, "--out", tmp / "again", "--quiet") == 0
        for name in ("checkpoint.bin", "metrics.json", "run.json"):
            assert (tmp / "again" / name).read_bytes() == (tmp / "run" / name).read_bytes()

    def test_from_generated_dataset(self, trained):
        tmp, cfg = trained
        assert _run("gen", "--config", cfg, "--out", tmp / "data") == 0
        path = tmp / "from_data.json"
        path.write_text(json.dumps({"schema_version": 1, "dataset": "data", "train": TRAIN}))
        assert _run("train", "--config", path, "--out", tmp / "run2", "--quiet") == 0
        assert (tmp / "run2" / "metrics.json").read_bytes() == (tmp / "run" / "metrics.json").read_bytes()


class TestPipelines:
    def test_compare(self, tmp_path):
        models = [{**TRAIN, "model_kind": "pt_rag"}, {**TRAIN, "model_kind": "vanilla_rag"}]
        cfg = _config(tmp_path, models=models, seeds=[0, 1])
        assert _run("compare", "--config", cfg, "--out", tmp_path / "cmp", "--quiet") == 0
        sig = json.loads((tmp_path / "cmp" / "significance.json").read_text())
        assert sig["reference"] == "pt_rag"
        cells = sig["tests"]["pt_rag vs vanilla_rag"]
        assert set(cells) >= {"pearson_deg", "energy"}
        assert all(c["marker"] in ("", "†", "††", "†††") for c in cells.values())
        assert (tmp_path / "cmp" / "runs" / "pt_rag" / "seed1" / "checkpoint.bin").exists()

    def test_compare_needs_two(self, tmp_path):
        cfg = _config(tmp_path, models=[TRAIN])
        assert _run("compare", "--config", cfg, "--out", tmp_path / "cmp") == 2

    def test_sweep(self, tmp_path):
        cfg = _config(tmp_path, sweep={"axis": "lambda", "values": [0, 1]})
        assert _run("sweep", "--config", cfg, "--out", tmp_path / "sw", "--quiet") == 0
        rep = json.loads((tmp_path / "sw" / "sweep.json").read_text())
        assert [r["value"] for r in rep["runs"]] == [0.0, 1.0]
        assert (tmp_path / "sw" / "runs" / "lambda=1.0" / "metrics.json").exists()

    @pytest.mark.parametrize("plan", [{"axis": "tau", "values": [1]}, {"axis": "K", "values": [0]},
                                      {"axis": "K", "values": []}, {"values": [1]}])
    def test_sweep_invalid(self, tmp_path, plan):
        cfg = _config(tmp_path, sweep=plan)
        assert _run("sweep", "--config", cfg, "--out", tmp_path / "sw") == 2

    def test_jaccard(self, tmp_path):
        cfg = _config(tmp_path, jaccard={"top_n": 2, "passes": 8})
        assert _run("jaccard", "--config", cfg, "--out", tmp_path / "jac", "--quiet") == 0
        rep = json.loads((tmp_path / "jac" / "jaccard.json").read_text())
        assert rep["top_n"] == 2 and rep["passes"] == 8
        assert all(rep["values"][i][i] == 1.0 for i in range(len(rep["labels"])))

    def test_jaccard_needs_pt_rag(self, tmp_path, capsys):
        cfg = _config(tmp_path, train={**TRAIN, "model_kind": "vanilla_rag"})
        assert _run("jaccard", "--config", cfg, "--out", tmp_path / "jac") == 2
        assert "pt_rag" in capsys.readouterr().err


def _metrics_dir(path, model, means):
    path.mkdir(parents=True)
    agg = {m: {"mean": v, "std": 0.0, "n": 1} for m, v in means.items()}
    (path / "metrics.json").write_text(json.dumps({"header": {"model": model},
                                                   "aggregate": {"overall": agg}}))
    return path


MEANS = {"pearson_deg": 0.5, "spearman_deg": 0.4, "mse": 1.0, "rmse": 1.0, "mae": 0.8,
         "mse_pca50": 2.0, "w1": 1.0, "w2": 2.0, "energy": 0.3, "mmd": 0.1}


class TestReport:
    def test_single_column(self, tmp_path):
        d = _metrics_dir(tmp_path / "a", "pt_rag", MEANS)
        text, table = cli.build_report([str(d)])
        assert "**" not in text and "†" not in text
        assert table.splitlines()[0] == "group,metric,pt_rag"

    def test_ties_go_to_first_column(self, tmp_path):
        a = _metrics_dir(tmp_path / "a", "x", MEANS)
        b = _metrics_dir(tmp_path / "b", "y", MEANS)
        text, _ = cli.build_report([str(a), str(b)])
        row = next(line for line in text.splitlines() if line.strip().startswith("mse ↓"))
        assert row.index("**") < row.index("| ", row.index("**"))
        assert row.count("**") == 2

    def test_best_per_direction(self, tmp_path):
        a = _metrics_dir(tmp_path / "a", "x", MEANS)
        b = _metrics_dir(tmp_path / "b", "y", {**MEANS, "pearson_deg": 0.9, "mse": 3.0})
        _, table = cli.build_report([str(a), str(b)])
        text, _ = cli.build_report([str(a), str(b)])
        lines = {l.split("|")[0].strip(): l for l in text.splitlines() if "|" in l}
        assert "**0.9000**" in lines["pearson_deg ↑"] and "**1.0000**" in lines["mse ↓"]
        assert "group,metric,x,y" in table

    def test_group_order(self, tmp_path):
        names = ["state", "state_genept", "vanilla_rag", "pt_rag"]
        dirs = [str(_metrics_dir(tmp_path / n, n, MEANS)) for n in names]
        text, table = cli.build_report(dirs)
        order = [text.index(g) for g in ("Gene-level expression correlations",
                                         "Expression reconstruction accuracy",
                                         "Distributional similarity")]
        assert order == sorted(order)
        metrics = [row.split(",")[1] for row in table.splitlines()[1:]]
        assert metrics == ["pearson_deg", "spearman_deg", "mse", "rmse", "mae", "mse_pca50",
                           "w1", "w2", "energy", "mmd"]

    def test_markers(self, tmp_path):
        a = _metrics_dir(tmp_path / "a", "pt_rag", MEANS)
        b = _metrics_dir(tmp_path / "b", "vanilla_rag", MEANS)
        sig = tmp_path / "sig.json"
        sig.write_text(json.dumps({"reference": "pt_rag",
                                   "tests": {"pt_rag vs vanilla_rag": {"energy": {"marker": "††"}}}}))
        text, table = cli.build_report([str(a), str(b)], str(sig))
        assert "0.3000††" in table and "†† < 0.05" in text

    def test_missing_metrics(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert _run("report", tmp_path / "empty") == 1
        err = capsys.readouterr().err
        assert "empty" in err and "metrics.json" in err

    def test_writes_text_and_csv(self, tmp_path):
        a = _metrics_dir(tmp_path / "a", "x", MEANS)
        assert _run("report", a, "--out", tmp_path / "rep", "--quiet") == 0
        text, table = cli.build_report([str(a)])
        assert (tmp_path / "rep" / "report.txt").read_text() == text
        assert (tmp_path / "rep" / "report.csv").read_text() == table


@pytest.mark.skipif(shutil.which("ptrag") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["ptrag", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("gen", "train", "eval", "compare", "sweep", "jaccard", "report"):
        assert name in out.stdout
