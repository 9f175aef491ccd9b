import json

import numpy as np
import pytest
import yaml

from fedcompress.cli import EXIT_BOUND, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from fedcompress.config import ConfigError, default_config, load, parse

SMALL = """\
seed: 3
task:
  kind: vec_classify
  size: 240
  pretrain_steps: 50
adapter:
  kind: compression
federation:
  n_clients: 4
  rounds: 3
  local_steps: 2
  learning_rate: 0.05
  clip_bound: 1.0
verify:
  client_counts: [2, 3]
  rounds: [1, 3]
  local_steps: [1, 2]
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


@pytest.mark.parametrize("kind", ["vec_classify", "seq_classify", "char_lm"])
def test_config_round_trip(kind):
    cfg = default_config(task={"kind": kind}, adapter={"kind": "fedsa_lora"})
    assert parse(cfg.dump()) == cfg


def test_missing_field_is_named(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(SMALL.replace("  clip_bound: 1.0\n", ""))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "federation.clip_bound" in capsys.readouterr().err


def test_config_diagnostics(tmp_path):
    with pytest.raises(ConfigError, match=r"<config>:3:8:"):
        parse("seed: 1\ntask: {kind: vec_classify\nadapter: x\n")
    with pytest.raises(ConfigError, match="task.colour"):
        parse(SMALL.replace("  size: 240", "  colour: red"))
    with pytest.raises(ConfigError, match="model.num_classes"):
        parse(SMALL + "model:\n  num_classes: 3\n")
    with pytest.raises(ConfigError, match="seed"):
        parse(SMALL.replace("seed: 3", "seed: -1"))
    with pytest.raises(ConfigError, match="missing.yaml"):
        load(tmp_path / "missing.yaml")


def test_partition_writes_manifests(small, tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["partition", "--config", str(small), "--out", str(out)]) == EXIT_OK
    clients = json.loads((out / "shards.json").read_text())["clients"]
    assert len(clients) == 4
    idx = np.concatenate([c["indices"] for c in clients])
    assert len(idx) == len(set(idx.tolist())) == sum(c["size"] for c in clients)
    assert capsys.readouterr().out.startswith("client\tlabel_0")


def test_partition_large_alpha_is_near_uniform(small, tmp_path):
    p = tmp_path / "u.yaml"
    p.write_text(SMALL + "dirichlet_alpha: 1000000.0\n")
    out = tmp_path / "u"
    assert main(["partition", "--config", str(p), "--out", str(out)]) == EXIT_OK
    clients = json.loads((out / "shards.json").read_text())["clients"]
    glob = np.sum([c["label_histogram"] for c in clients], axis=0)
    for c in clients:
        assert np.abs(np.array(c["label_histogram"]) - glob / 4).max() <= 1


def test_run_layout_and_rerun(small, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(small), "--out", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(small), "--out", str(b)]) == EXIT_OK
    for name in ("config.yaml", "records.csv", "bounds.txt", "shards.json", "label_histogram.tsv",
                 "eval.json", "checkpoints/initial.json", "checkpoints/final.json"):
        assert (a / name).exists(), name
    assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()
    header = (a / "records.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["round", "client_0", "client_1", "client_2", "client_3"]
    assert header[5:8] == ["eval_loss", "eval_acc", "macro_f1"]
    assert "lemma1_bound" in header and "lemma1_slack" in header
    assert len((a / "records.csv").read_text().splitlines()) == 1 + 4
    # the stored config reproduces the run
    c = tmp_path / "c"
    assert main(["run", "--config", str(a / "config.yaml"), "--out", str(c)]) == EXIT_OK
    assert (c / "records.csv").read_bytes() == (a / "records.csv").read_bytes()
    summary = json.loads((a / "eval.json").read_text())
    assert summary["bound_violations"] == 0 and "epoch_mapping" in summary


def test_seed_override_and_out_root(small, tmp_path, monkeypatch):
    monkeypatch.setenv("FEDCOMPRESS_OUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--config", str(small), "--out", "rel", "--seed", "9"]) == EXIT_OK
    assert yaml.safe_load((tmp_path / "root/rel/config.yaml").read_text())["seed"] == 9


def test_patience_stops_early(tmp_path):
    p = tmp_path / "pat.yaml"
    p.write_text(SMALL.replace("rounds: 3", "rounds: 40").replace("local_steps: 2", "local_steps: 5")
                 .replace("clip_bound: 1.0", "clip_bound: 1.0\n  patience: 2"))
    out = tmp_path / "pat"
    assert main(["run", "--config", str(p), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "eval.json").read_text())
    assert summary["stopped_round"] is not None and summary["stopped_round"] < 40
    assert summary["rounds_completed"] == summary["stopped_round"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_negative_control_run_is_labelled(small, tmp_path, capsys):
    out = tmp_path / "nc"
    assert main(["run", "--config", str(small), "--out", str(out), "--negative-control-no-clip"]) == EXIT_BOUND
    assert "negative-control" in capsys.readouterr().out
    assert "NEGATIVE CONTROL" in (out / "bounds.txt").read_text()
    assert json.loads((out / "eval.json").read_text())["negative_control"] is True


def test_convex_instance_flag(small, tmp_path):
    out = tmp_path / "cv"
    assert main(["run", "--config", str(small), "--out", str(out), "--convex-instance"]) == EXIT_OK
    assert "excess-risk" in (out / "bounds.txt").read_text()


def test_verify_exit_codes(small, tmp_path, capsys):
    assert main(["verify", "--config", str(small), "--out", str(tmp_path / "v")]) == EXIT_OK
    assert (tmp_path / "v/verify.txt").exists()
    assert main(["verify", "--config", str(small), "--out", str(tmp_path / "n"),
                 "--negative-control-no-clip"]) == EXIT_BOUND
    assert "NEGATIVE CONTROL" in capsys.readouterr().out
    empty = tmp_path / "e.yaml"
    empty.write_text(SMALL.replace("rounds: [1, 3]", "rounds: []"))
    assert main(["verify", "--config", str(empty), "--out", str(tmp_path / "e")]) == EXIT_CONFIG


def test_compare_rows_and_rerun(small, tmp_path):
    p = tmp_path / "cmp.yaml"
    p.write_text(SMALL + "compare:\n  client_counts: [3, 4]\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["compare", "--config", str(p), "--out", str(a)]) == EXIT_OK
    assert main(["compare", "--config", str(p), "--out", str(b)]) == EXIT_OK
    assert (a / "compare.md").read_bytes() == (b / "compare.md").read_bytes()
    rows = (a / "compare.csv").read_text().splitlines()[1:]
    assert len(rows) == 8
    assert "within declared band" in (a / "compare.md").read_text()


def test_runtime_error_exit_code(tmp_path, capsys):
    p = tmp_path / "r.yaml"
    p.write_text(SMALL.replace("size: 240", "size: 8").replace("n_clients: 4", "n_clients: 8"))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "r")]) == EXIT_RUNTIME
    assert "error during run" in capsys.readouterr().err


def test_default_config_prints_valid_yaml(capsys):
    assert main(["default-config"]) == EXIT_OK
    assert parse(capsys.readouterr().out) == default_config()
