import csv
import json
import os

import numpy as np
import pytest

from unlearnlab import cli, harness
from unlearnlab.errors import ConfigurationError, DataEnvironmentError

from conftest import needs_data

TINY = {
    "scenario": {"train_size": 400, "ipc": 2, "seeds": [0]},
    "condense": {"iterations": 2, "real_batch": 16},
    "train": {"epochs": 2, "batch_size": 20},
    "unlearn": {"probe_size": 32, "cg_iters": 3, "steps_grid": [1],
                "tau_grid": {"first-order": [1e-3, 1e-2], "second-order": [1e-3, 1e-2], "neg-grad": [1e-4, 1e-3]}},
    "budget": {"iterations": 3},
}


def tiny(**scenario):
    return harness.ScenarioSpec.make(config=TINY, **scenario)


def fake_report():
    rows = []
    for seed in (0, 1):
        row = harness.base_row(harness.ScenarioSpec(), seed, "neg-grad")
        row.update(tau=1e-3, steps=3, forget_size_normal=100, forget_size_informative=100, acc_before=0.975,
                   acc_after_normal=0.97, acc_after_informative=0.5, trace_normal=[0.973, 0.97],
                   trace_informative=[0.7, 0.5], notes="a, b")
        row["drop_normal"] = row["acc_before"] - row["acc_after_normal"]
        row["drop_informative"] = row["acc_before"] - row["acc_after_informative"]
        rows.append(row)
    spec = harness.ScenarioSpec()
    return harness.ExperimentReport(rows, spec.config, spec.digest())


# ---------------------------------------------------------------- configuration


def test_config_digest_is_order_independent():
    a = {"x": 1, "y": {"b": 2, "a": [1, 2]}}
    b = {"y": {"a": [1, 2], "b": 2}, "x": 1}
    assert harness.config_digest(a) == harness.config_digest(b)
    assert harness.config_digest(a) != harness.config_digest({"x": 2, "y": a["y"]})


def test_merge_config_is_deep_and_pure():
    base = harness.default_config()
    merged = harness.merge_config(base, {"train": {"epochs": 3}})
    assert merged["train"]["epochs"] == 3 and merged["train"]["batch_size"] == 50
    assert base["train"]["epochs"] == 20


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        harness.ScenarioSpec.make(kind="oracle")
    with pytest.raises(ConfigurationError):
        harness.ScenarioSpec.make(kind="partial", fraction=0.3)
    with pytest.raises(ConfigurationError):
        harness.ScenarioSpec.make(methods=["retrain"])
    assert harness.ScenarioSpec.make(kind="partial", fraction=0.3, allow_any_fraction=True).scenario["fraction"] == 0.3


def test_default_partial_fractions_accepted():
    for f in (0.01, 0.02, 0.05, 0.10):
        harness.ScenarioSpec.make(kind="partial", fraction=f)


# ---------------------------------------------------------------- report emission


def test_csv_header_contract(tmp_path):
    rep = fake_report()
    path = str(tmp_path / "r.csv")
    harness.emit_report(rep, "csv", path)
    lines = list(csv.reader(open(path, encoding="utf-8")))
    assert lines[0] == [f"# config_digest={rep.config_digest}", f"tool_version={harness.TOOL_VERSION}"]
    assert lines[1] == harness.COLUMNS
    assert len(lines) == 2 + len(rep.rows)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_emit_then_parse_round_trip(tmp_path, fmt):
    rep = fake_report()
    path = str(tmp_path / f"r.{fmt}")
    harness.emit_report(rep, fmt, path)
    back = harness.read_report(path)
    assert back.config_digest == rep.config_digest and back.tool_version == rep.tool_version
    for a, b in zip(back.rows, rep.rows):
        assert a == {c: b.get(c) for c in harness.COLUMNS}


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_emission_is_byte_identical(tmp_path, fmt):
    rep = fake_report()
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    harness.emit_report(rep, fmt, a)
    harness.emit_report(rep, fmt, b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_emit_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.emit_report(fake_report(), "xml", str(tmp_path / "r"))
    with pytest.raises(OSError):
        harness.emit_report(fake_report(), "csv", str(tmp_path / "missing" / "r.csv"))


def test_drop_columns_are_differences():
    for r in fake_report().rows:
        assert r["drop_normal"] == r["acc_before"] - r["acc_after_normal"]


def test_summarize_mentions_methods():
    assert "neg-grad" in harness.summarize(fake_report())


# ---------------------------------------------------------------- scenario runs


def test_empty_seed_list_gives_empty_report():
    spec = tiny(seeds=[])
    assert harness.run_scenario(spec).rows == []
    assert harness.retrain_baseline(spec).rows == []


def test_missing_dataset_is_environment_error(monkeypatch, tmp_path):
    monkeypatch.setenv("UNLEARN_DATA_DIR", str(tmp_path))
    rows = harness.run_scenario(tiny()).rows
    assert len(rows) == 1 and rows[0]["status"].startswith("failed: DataEnvironmentError")


def test_injection_cap_enforced():
    with pytest.raises(ConfigurationError):
        harness.run_scenario(tiny(ipc=3))


@needs_data
def test_no_methods_reports_accuracy_only():
    rows = harness.run_scenario(tiny(methods=[])).rows
    assert len(rows) == 1
    assert rows[0]["acc_before"] is not None and rows[0]["drop_informative"] is None


@needs_data
def test_partial_fraction_one_equals_full():
    full = harness.prepare_seed(tiny(methods=[]), 0)
    part = harness.prepare_seed(tiny(methods=[], kind="partial", fraction=1.0), 0)
    assert set(full.knowledge.ids.tolist()) == set(part.knowledge.ids.tolist())
    assert np.array_equal(full.synthetic.images, part.synthetic.images)


@needs_data
def test_seed_run_layout():
    run = harness.prepare_seed(tiny(methods=["amnesiac"]), 0)
    assert len(run.informative_ids) == len(run.control_ids) == 20
    assert set(run.train.select_ids(run.control_ids).tags) == {"control"}
    assert np.bincount(run.train.select_ids(run.control_ids).labels).tolist() == [2] * 10
    assert run.ledger.telescopes()


@needs_data
def test_full_tiny_scenario_rows():
    rows = harness.run_scenario(tiny()).rows
    assert [r["method"] for r in rows] == list(harness.ul.METHODS)
    for r in rows:
        assert r["status"] == "ok", r["status"]
        assert r["forget_size_normal"] == r["forget_size_informative"]
        assert r["drop_informative"] == r["acc_before"] - r["acc_after_informative"]


@needs_data
def test_method_failure_becomes_row(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(harness, "tuned", boom)
    rows = harness.run_scenario(tiny(methods=["neg-grad"])).rows
    assert rows[0]["status"] == "failed: RuntimeError: solver exploded"
    assert rows[0]["acc_before"] is not None


@needs_data
def test_seed_isolation():
    a = harness.run_scenario(tiny(methods=["neg-grad"], seeds=[1, 0])).rows
    b = harness.run_scenario(tiny(methods=["neg-grad"], seeds=[1])).rows
    assert [r["seed"] for r in a] == [0, 1]
    assert a[1] == b[0]


# ---------------------------------------------------------------- command line


def test_parser_verbs():
    p = cli.build_parser()
    for verb in ("train", "condense", "attack", "defend", "budget"):
        args = p.parse_args([verb, "--seed", "3", "--out", "x"])
        assert args.seed == 3 and args.out == "x" and callable(args.fn)
    args = p.parse_args(["report", "r.json", "--format", "csv"])
    assert args.input == "r.json"
    with pytest.raises(SystemExit):
        p.parse_args(["retrain"])


def test_cli_report_verb(tmp_path, capsys):
    src = str(tmp_path / "r.json")
    harness.emit_report(fake_report(), "json", src)
    assert cli.main(["report", src, "--format", "csv", "--out", str(tmp_path / "o")]) == 0
    assert os.path.exists(tmp_path / "o" / "report.csv")
    assert "neg-grad" in capsys.readouterr().out


@needs_data
def test_cli_condense_then_train(tmp_path, capsys):
    cfg = str(tmp_path / "cfg.json")
    json.dump(TINY, open(cfg, "w"))
    out = str(tmp_path / "o")
    assert cli.main(["condense", "--config", cfg, "--seed", "0", "--out", out]) == 0
    assert cli.main(["train", "--config", cfg, "--seed", "0", "--out", out, "--ledger",
                     "--inject", os.path.join(out, "synthetic.bin")]) == 0
    assert {"synthetic.bin", "model.bin", "model.bin.meta", "ledger.bin"} <= set(os.listdir(out))
    assert "test accuracy" in capsys.readouterr().out
