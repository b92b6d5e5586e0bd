import csv
import json

import numpy as np
import pytest

from bidcspell.cli import main
from bidcspell.config import ExperimentConfig
from bidcspell.errors import ConfigError
from bidcspell.evaluation import validate_report
from bidcspell.training import load_checkpoint

SMALL = {
    "corpus": {"n_symbols": 18, "length": [3, 8], "sizes": {"train": 40, "dev": 10, "test": 10}, "error_rate": 0.3},
    "model": {"d_h": 8, "d_ff": 16, "det_depth": 1, "cor_depth": 1, "layers": 1, "max_len": 8},
    "train": {"epochs": 1, "batch_size": 16},
    "sweep": {"seeds": [0]},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(SMALL), encoding="utf-8")
    return str(p)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"optimizer": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"width": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sweep": {"kind": "lambda", "grid": [1.5]}})


def test_config_round_trip():
    exp = ExperimentConfig.from_dict(SMALL)
    assert ExperimentConfig.from_dict(exp.to_dict()).to_dict() == exp.to_dict()
    assert exp.train.epochs == 1 and exp.train.learning_rate == ExperimentConfig().train.learning_rate


def test_unknown_config_key_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"model": {"widht": 3}}', encoding="utf-8")
    assert main(["--config", str(p), "gradcheck", "--seeds", "0", "--modes", "c-only"]) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "nonsense"])
    assert exc.value.code == 1


def test_gen_data_is_reproducible(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--config", config, "--out", str(a), "gen-data"]) == 0
    assert main(["--config", config, "--out", str(b), "gen-data"]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == ["dev.tsv", "manifest.json", "test.tsv", "train.tsv"]
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_train_eval_correct_pipeline(config, tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["--config", config, "--out", str(data), "gen-data"]) == 0
    assert main(["--config", config, "--out", str(run), "train", "--data", str(data), "--epochs", "2"]) == 0
    assert {p.name for p in run.iterdir()} >= {"best.ckpt", "last.ckpt", "train_log.jsonl"}
    records = [json.loads(x) for x in (run / "train_log.jsonl").read_text(encoding="utf-8").splitlines()]
    assert len(records) == 2
    capsys.readouterr()

    assert main(["--config", config, "--out", str(run), "eval", str(run / "best.ckpt"), "--data", str(data),
                 "--split", "dev", "--json"]) == 0
    out = capsys.readouterr().out
    report = json.loads(out.strip().splitlines()[-1])
    validate_report(report)
    assert "hard detection" in out and "mean gates" in out
    best_epoch = load_checkpoint(run / "best.ckpt").train_state["epoch"]
    logged = records[best_epoch - 1]["dev_cor_f1"]
    assert abs(report["sentence"]["correction"]["f1"] - logged) <= 1e-12
    assert (run / "report.json").exists()

    manifest = json.loads((data / "manifest.json").read_text(encoding="utf-8"))
    line = "".join(manifest["vocab"][:5])
    assert main(["correct", str(run / "best.ckpt"), line]) == 0
    corrected, carets = (capsys.readouterr().out.split("\n") + [""])[:2]
    assert len(corrected) == 5 and set(carets) <= {" ", "^"}


def test_resume_continues_training(config, tmp_path):
    run = tmp_path / "run"
    assert main(["--config", config, "--out", str(run), "train", "--epochs", "1"]) == 0
    assert main(["--config", config, "--out", str(run), "train", "--epochs", "2",
                 "--resume", str(run / "last.ckpt")]) == 0
    ref = tmp_path / "ref"
    assert main(["--config", config, "--out", str(ref), "train", "--epochs", "2"]) == 0
    a, b = load_checkpoint(run / "last.ckpt"), load_checkpoint(ref / "last.ckpt")
    for k in a.params:
        assert np.max(np.abs(a.params[k] - b.params[k])) <= 1e-12


def test_eval_vocab_mismatch_is_data_error(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--config", config, "--out", str(run), "train", "--epochs", "0"]) == 0
    other = dict(SMALL, corpus=dict(SMALL["corpus"], grammar_seed=7))
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other), encoding="utf-8")
    assert main(["--config", str(p), "eval", str(run / "best.ckpt")]) == 2
    assert "vocabulary" in capsys.readouterr().err


def test_correct_empty_line_and_unknown(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["--config", config, "--out", str(run), "train", "--epochs", "0"]) == 0
    capsys.readouterr()
    assert main(["correct", str(run / "best.ckpt"), ""]) == 0
    assert capsys.readouterr().out == "\n"
    assert main(["correct", str(run / "best.ckpt"), "ab"]) == 0
    captured = capsys.readouterr()
    assert "unknown" in captured.err
    assert captured.out.splitlines()[0] == "ab"


def test_missing_checkpoint_is_data_error(tmp_path):
    assert main(["correct", str(tmp_path / "nope.ckpt"), "x"]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_ablate_outputs(config, tmp_path):
    out = tmp_path / "abl"
    assert main(["--config", config, "--out", str(out), "ablate", "--seeds", "0", "1"]) == 0
    result = json.loads((out / "ablation.json").read_text(encoding="utf-8"))
    assert len(result["rows"]) == 6
    assert [r["mode"] for r in result["rows"][:3]] == ["bidc", "d2c", "c-only"]
    means = result["means"]
    assert result["deltas"]["bidc"]["cor_f1"] == pytest.approx(means["bidc"]["cor_f1"] - means["c-only"]["cor_f1"])
    rows = list(csv.DictReader(open(out / "ablation.csv", encoding="utf-8")))
    assert len(rows) == 6


def test_sweep_lambda_csv_rows_follow_grid(config, tmp_path):
    out = tmp_path / "sw"
    assert main(["--config", config, "--out", str(out), "--threads", "2", "sweep", "lambda",
                 "--grid", "0", "0.5", "1"]) == 0
    rows = list(csv.DictReader(open(out / "sweep_lambda.csv", encoding="utf-8")))
    assert [float(r["lambda"]) for r in rows] == [0.0, 0.5, 1.0]


def test_sweep_threads_do_not_change_results(config, tmp_path):
    for t in ("1", "2"):
        assert main(["--config", config, "--out", str(tmp_path / t), "--threads", t, "sweep", "layers",
                     "--grid", "1", "2"]) == 0
    a = json.loads((tmp_path / "1" / "sweep_layers.json").read_text(encoding="utf-8"))
    b = json.loads((tmp_path / "2" / "sweep_layers.json").read_text(encoding="utf-8"))
    assert a == b


def test_gates_sweep_inference_only_corner_matches_fixed_model(config, tmp_path):
    out = tmp_path / "g"
    assert main(["--config", config, "--out", str(out), "sweep", "gates", "--grid", "0", "1",
                 "--inference-only"]) == 0
    rows = json.loads((out / "sweep_gates.json").read_text(encoding="utf-8"))["rows"]
    assert [(r["alpha"], r["beta"]) for r in rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    # overridden gates report their fixed value as the layer mean
    for r in rows:
        assert r["gate_means"]["0"] == {"alpha": r["alpha"], "beta": r["beta"]}


def test_gates_sweep_cell_equals_fixed_gate_training(config, tmp_path):
    out = tmp_path / "g"
    assert main(["--config", config, "--out", str(out), "sweep", "gates", "--grid", "0"]) == 0
    cell = json.loads((out / "sweep_gates.json").read_text(encoding="utf-8"))["rows"][0]
    fixed = dict(SMALL, model=dict(SMALL["model"], gate_override_alpha=0.0, gate_override_beta=0.0))
    p = tmp_path / "fixed.json"
    p.write_text(json.dumps(fixed), encoding="utf-8")
    run = tmp_path / "run"
    assert main(["--config", str(p), "--out", str(run), "train"]) == 0
    assert main(["--config", str(p), "--out", str(tmp_path / "ev"), "eval", str(run / "best.ckpt")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text(encoding="utf-8"))
    assert report["sentence"]["correction"]["f1"] == cell["cor_f1"]


def test_bad_sweep_grid_exit_code(config):
    assert main(["--config", config, "sweep", "lambda", "--grid", "2.0"]) == 1
    assert main(["--config", config, "sweep", "layers", "--grid", "0"]) == 1


def test_bidc_log_env_validated(monkeypatch, config):
    monkeypatch.setenv("BIDC_LOG", "loud")
    assert main(["--config", config, "gradcheck", "--seeds", "0", "--modes", "c-only"]) == 1
