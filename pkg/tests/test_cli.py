import csv
import json
from importlib import resources

import pytest

from currigraph.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main


@pytest.fixture
def sample_config(tmp_path):
    doc = json.loads(resources.files("currigraph").joinpath("data/sample/config.json").read_text())
    doc["output_dir"] = str(tmp_path / "run")
    doc["train"]["episodes_max"] = 5
    doc["finetune"]["epochs"] = 10
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path, doc


def run(*argv):
    return main([str(a) for a in argv])


def stderr_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_pretrain_smoke(sample_config, tmp_path):
    path, _ = sample_config
    assert run("pretrain", "--config", path) == EXIT_OK
    out = tmp_path / "run"
    assert (out / "checkpoint" / "manifest.json").is_file()
    assert (out / "config.json").is_file()
    with open(out / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_missing_target_is_config_error(sample_config, tmp_path, capsys):
    _, doc = sample_config
    del doc["target"]
    doc["train"]["lambda1"] = -1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("pretrain", "--config", bad) == EXIT_CONFIG
    err = stderr_json(capsys)
    fields = {e["field"] for e in err["errors"]}
    assert {"target", "train.lambda1"} <= fields


def test_unknown_key_and_bad_paths_reported_together(sample_config, tmp_path, capsys):
    _, doc = sample_config
    doc["bogus"] = 1
    doc["sources"] = ["does/not/exist"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run("pretrain", "--config", bad) == EXIT_CONFIG
    fields = {e["field"] for e in stderr_json(capsys)["errors"]}
    assert {"<root>", "sources.0"} <= fields


def test_seed_flag_beats_file(sample_config, tmp_path):
    path, _ = sample_config
    assert run("pretrain", "--config", path, "--seed", 11) == EXIT_OK
    snap = json.loads((tmp_path / "run" / "config.json").read_text())
    assert snap["seed"] == 11 and snap["train"]["seed"] == 11
    ck = json.loads((tmp_path / "run" / "checkpoint" / "manifest.json").read_text())
    assert ck["config"]["seed"] == 11
    assert run("--seed", 12, "pretrain", "--config", path) == EXIT_OK
    assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 12


def test_finetune_then_eval_is_idempotent(sample_config, tmp_path):
    path, _ = sample_config
    assert run("pretrain", "--config", path) == EXIT_OK
    assert run("finetune", "--config", path) == EXIT_OK
    assert run("eval", "--config", path) == EXIT_OK
    first = (tmp_path / "run" / "result.json").read_text()
    acc = json.loads(first)["accuracy"]
    assert 0.0 <= acc <= 1.0
    assert run("eval", "--config", path) == EXIT_OK
    assert (tmp_path / "run" / "result.json").read_text() == first


def test_finetune_refuses_mismatched_checkpoint(sample_config, tmp_path, capsys):
    path, doc = sample_config
    assert run("pretrain", "--config", path) == EXIT_OK
    doc["train"]["lambda2"] = 3.0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    assert run("finetune", "--config", other) == EXIT_CONFIG
    assert "refusing checkpoint" in stderr_json(capsys)["message"]


def test_eval_without_artifacts_names_missing_file(sample_config, capsys):
    path, _ = sample_config
    assert run("eval", "--config", path) == EXIT_DATA
    assert "manifest.json" in stderr_json(capsys)["message"]


def test_baseline_finetune(sample_config, tmp_path):
    path, _ = sample_config
    assert run("finetune", "--config", path, "--baseline") == EXIT_OK
    assert json.loads((tmp_path / "run" / "finetune" / "result.json").read_text())["baseline"]


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "er", "--n", 100, "--p", 0.05, "--seed", 7, "--out", tmp_path / name) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "edges.csv" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sweep_grid_rows(sample_config, tmp_path):
    path, _ = sample_config
    assert run("sweep", "--config", path) == EXIT_OK
    rows = (tmp_path / "run" / "grid.csv").read_text().strip().splitlines()
    assert len(rows) == 5
    assert (tmp_path / "run" / "grid_test_acc.png").is_file()


def test_scale_rows_and_slope(tmp_path):
    cfg = tmp_path / "scale.json"
    cfg.write_text(json.dumps({"schema_version": 1, "output_dir": str(tmp_path / "scale"),
                               "train": {"student_widths": [8, 8]},
                               "scale": {"depths": [2], "level_base": 16}}))
    assert run("scale", "--config", cfg, "--sizes", "500,1000,2000", "--episodes", 1) == EXIT_OK
    result = json.loads((tmp_path / "scale" / "result.json").read_text())
    assert len(result["rows"]) == 3 and result["slopes"]["2"] is not None
    assert (tmp_path / "scale" / "scale.csv").read_text().count("\n") == 4


def test_report_collects_runs(sample_config, tmp_path):
    path, _ = sample_config
    assert run("experiment", "--config", path) == EXIT_OK
    assert run("report", tmp_path / "run", "--out", tmp_path / "rep") == EXIT_OK
    text = (tmp_path / "rep" / "accuracy.csv").read_text()
    assert "full" in text and "no_pretrain" in text
    assert run("report", tmp_path / "nope", "--out", tmp_path / "rep2") == EXIT_DATA


def test_temporal_command(tmp_path):
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps({"schema_version": 1, "output_dir": str(tmp_path / "t"),
                               "train": {"level_sizes": [6, 3], "episodes_max": 2,
                                         "student_widths": [8, 8]},
                               "temporal": {"block_sizes": [6, 6], "synthetic_steps": 3}}))
    assert run("temporal", "--config", cfg) == EXIT_OK
    result = json.loads((tmp_path / "t" / "result.json").read_text())
    assert result["held_out"] == ["snap_2", "snap_3"] and len(result["train_pairs"]) == 1


def test_relative_bundle_paths_use_data_root(tmp_path, monkeypatch):
    data = tmp_path / "data"
    assert run("gen", "sbm", "--out", data / "pair") == EXIT_OK
    doc = {"schema_version": 1, "sources": ["pair/source"], "target": "pair/target",
           "output_dir": str(tmp_path / "run"),
           "train": {"level_sizes": [4, 2], "episodes_max": 2, "attribute_batch": 4, "edge_batch": 4}}
    path = tmp_path / "rel.json"
    path.write_text(json.dumps(doc))
    monkeypatch.setenv("CURRIGRAPH_DATA_DIR", str(data))
    assert run("pretrain", "--config", path) == EXIT_OK
    monkeypatch.setenv("CURRIGRAPH_DATA_DIR", str(tmp_path / "elsewhere"))
    assert run("pretrain", "--config", path) == EXIT_CONFIG


def test_packaged_sample_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("--config", "pkg:sample/config.json", "--out", tmp_path / "r", "pretrain") == EXIT_OK
    assert (tmp_path / "r" / "checkpoint" / "manifest.json").is_file()
