import json
from pathlib import Path

import pytest
import torch

from mcsql.cli import main
from mcsql.dataset_io import load_bundle
from mcsql.parser import CheckpointError, Parser

from conftest import tiny_parser, toy_examples, toy_table

SMALL_SYNTH = {"n_tables": 12, "examples_per_table": 12, "rows_per_table": [4, 6], "headers_per_table": [3, 5]}
SMALL_MODEL = {"encoder": {"d": 16, "d_e": 8, "d_t": 4, "context_layers": 1, "context_heads": 2}}


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "gen.json", synth=SMALL_SYNTH)
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(root / "data")]) == 0
    return root


def test_gen_data_is_reproducible(data_dir, tmp_path):
    cfg = write_config(tmp_path / "gen.json", synth=SMALL_SYNTH)
    assert main(["gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "again")]) == 0
    for name in ("tables.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl", "bundle.json"):
        assert (tmp_path / "again" / name).read_bytes() == (data_dir / "data" / name).read_bytes()
    run = json.loads((tmp_path / "again" / "run_config.json").read_text())
    assert run["seed"] == 3 and run["synth"]["n_tables"] == 12


def test_train_then_eval_reports_tags(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "train.json", model=SMALL_MODEL, meta={"n_way": 2, "k_shot": 2, "eval_every": 0})
    out = tmp_path / "run"
    code = main(["train", "--config", cfg, "--data", str(data_dir / "data"), "--out", str(out), "--no-ml",
                 "--tasks", "3", "--seed", "1"])
    assert code == 0
    log = [json.loads(x) for x in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [0, 1, 2] and all(r["L_Q"] is None for r in log)
    assert (out / "model.pt").exists() and (out / "eval.jsonl").exists()
    capsys.readouterr()
    assert main(["eval", "--data", str(data_dir / "data"), "--checkpoint", str(out / "model.pt"),
                 "--split", "test", "--out", str(tmp_path / "ev")]) == 0
    text = capsys.readouterr().out
    assert "zero-shot" in text and "no_ml=True" in text and "no_tc=False" in text
    rows = [json.loads(x) for x in (tmp_path / "ev" / "eval.jsonl").read_text().splitlines()]
    assert rows[0]["split"] == "test" and rows[0]["tags"]["no_ml"] is True


def test_untrained_parser_scores_low(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "train.json", model=SMALL_MODEL, meta={"eval_every": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", str(data_dir / "data"), "--out", str(out), "--tasks", "0"]) == 0
    rows = [json.loads(x) for x in (out / "eval.jsonl").read_text().splitlines()]
    assert rows[0]["slice"] == "full" and rows[0]["lf_accuracy"] < 0.2


def test_link_and_execute(data_dir, capsys):
    bundle_dir = str(data_dir / "data")
    bundle = load_bundle(bundle_dir)
    ex = next(e for e in bundle.examples["train"] if e.gold.conds and e.gold.conds[0].op == 0)
    capsys.readouterr()
    assert main(["link", "--data", bundle_dir, "--table-id", ex.table_id, "--question", ex.question]) == 0
    assert ex.gold.conds[0].value.lower() in capsys.readouterr().out.lower()
    sql = ex.gold.to_text()
    assert main(["execute", "--data", bundle_dir, "--table-id", ex.table_id, "--sql", sql]) == 0
    json.loads(capsys.readouterr().out)


def test_execute_on_wikisql_tables(capsys):
    tables = Path(__file__).parent / "fixtures" / "wikisql" / "tables.jsonl"
    assert main(["execute", "--tables", str(tables), "--table-id", "2-12345-2",
                 "--sql", "SELECT SUM(Gold) WHERE Total > 4"]) == 0
    assert json.loads(capsys.readouterr().out) == 8.0
    assert main(["execute", "--tables", str(tables), "--table-id", "2-12345-2", "--sql", "SELECT SUM(Nation)"]) == 1


@pytest.mark.parametrize("argv", [
    ["train"],  # missing --out
    ["frobnicate"],
    ["eval", "--data", "x"],  # missing --checkpoint
    ["gen-data", "--out", "x", "--train-fraction", "2"],
    ["execute", "--table-id", "t", "--sql", "SELECT col0"],  # no table source
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_unknown_config_key_is_a_usage_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", learning_rate=1)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_runtime_errors_exit_1(tmp_path, data_dir):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["link", "--data", str(data_dir / "data"), "--table-id", "nope", "--question", "x"]) == 1
    assert main(["eval", "--data", str(data_dir / "data"), "--checkpoint", str(tmp_path / "none.pt")]) == 1


def test_bad_log_level_is_a_usage_error(monkeypatch, tmp_path):
    monkeypatch.setenv("MCSQL_LOG_LEVEL", "loud")
    assert main(["gen-data", "--out", str(tmp_path)]) == 2


def test_checkpoint_round_trip(tmp_path):
    parser = tiny_parser(seed=4)
    parser.save(tmp_path / "m.pt", {"note": "x"})
    loaded, meta = Parser.load(tmp_path / "m.pt")
    assert meta["note"] == "x"
    tables = {"toy": toy_table()}
    exs = toy_examples()
    assert loaded.predict_batch(exs, tables) == parser.predict_batch(exs, tables)
    for (n, a), (_, b) in zip(parser.model.state_dict().items(), loaded.model.state_dict().items()):
        assert torch.equal(a, b), n


def test_corrupt_checkpoint_is_rejected(tmp_path):
    torch.save({"format": "something-else"}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        Parser.load(tmp_path / "bad.pt")
