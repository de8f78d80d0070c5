import json
import os

import numpy as np
import pytest

from trifuse.cli import build_parser, main

TINY = ["--seq-len", "4", "--d-t", "6", "--d-a", "4", "--d-v", "3",
        "--d-latent", "5", "--d-fusion", "6"]
TINY_DATA = ["--synth-n", "48"]


def run(args, capsys=None):
    return main([str(a) for a in args])


def test_gen_data_writes_feature_file(tmp_path):
    out = tmp_path / "feat.jsonl"
    code = run(["--out-dir", tmp_path, "gen-data", "--n", "12", "--seq-len", "4",
                "--d-t", "3", "--d-a", "2", "--d-v", "2", "--out", out])
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 12
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "label", "text", "audio", "visual"}
    assert (tmp_path / "gen_data_config.json").exists()


def test_train_writes_all_artifacts(tmp_path):
    code = run(["--out-dir", tmp_path, "train", "--epochs", "1", *TINY, *TINY_DATA])
    assert code == 0
    for fname in ("trace.jsonl", "metrics.jsonl", "config.json", "checkpoint.json"):
        assert (tmp_path / fname).exists(), fname


def test_train_byte_identical_reruns(tmp_path):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    for d in (d1, d2):
        assert run(["--out-dir", d, "train", "--epochs", "1", "--seed", "7",
                    *TINY, *TINY_DATA]) == 0
    for fname in ("trace.jsonl", "metrics.jsonl", "config.json", "checkpoint.json"):
        assert (d1 / fname).read_bytes() == (d2 / fname).read_bytes()


def test_train_config_file_and_set_overrides(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "epochs": 1,
        "model": {"seq_len": 4, "d_t": 6, "d_a": 4, "d_v": 3, "d_latent": 5, "d_fusion": 6},
    }))
    code = run(["--out-dir", tmp_path, "train", "--config", cfg_path,
                "--set", "modulation.eta=0.25", "--set", "toggles.ge=false",
                *TINY_DATA])
    assert code == 0
    snapshot = json.loads((tmp_path / "config.json").read_text())
    assert snapshot["modulation"]["eta"] == 0.25
    assert snapshot["toggles"]["ge"] is False
    assert snapshot["model"]["seq_len"] == 4


def test_flags_override_config_file(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"epochs": 5, "seed": 1}))
    code = run(["--out-dir", tmp_path, "train", "--config", cfg_path,
                "--epochs", "1", *TINY, *TINY_DATA])
    assert code == 0
    snapshot = json.loads((tmp_path / "config.json").read_text())
    assert snapshot["epochs"] == 1
    assert snapshot["seed"] == 1


def test_unknown_set_path_is_runtime_error(tmp_path):
    code = run(["--out-dir", tmp_path, "train", "--set", "nonsense.path=1",
                *TINY, *TINY_DATA])
    assert code == 2


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train", "--no-such-flag"])
    assert exc.value.code == 1


def test_missing_subcommand_exit_1():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([])
    assert exc.value.code == 1


def test_schema_error_exit_2(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": 1}\n')
    code = run(["--out-dir", tmp_path, "train", "--data", bad, *TINY])
    assert code == 2


def test_eval_matches_training_test_metrics(tmp_path):
    run_dir = tmp_path / "run"
    assert run(["--out-dir", run_dir, "train", "--epochs", "1", "--seed", "3",
                *TINY, *TINY_DATA]) == 0
    eval_dir = tmp_path / "eval"
    assert run(["--out-dir", eval_dir, "eval",
                "--checkpoint", run_dir / "checkpoint.json", "--seed", "3",
                *TINY, *TINY_DATA]) == 0
    eval_payload = json.loads((eval_dir / "eval.json").read_text())
    trained = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    final_test = [m for m in trained if m["split"] == "test"][-1]
    for key in ("acc2", "f1", "mae", "corr"):
        assert eval_payload[key] == final_test[key]


def test_gradcheck_default_model_passes(tmp_path):
    code = run(["--out-dir", tmp_path, "gradcheck", "--tol", "1e-4",
                "--seq-len", "3", "--d-t", "4", "--d-a", "3", "--d-v", "3",
                "--d-latent", "4", "--d-fusion", "5"])
    assert code == 0
    payload = json.loads((tmp_path / "gradcheck.json").read_text())
    assert payload["passed"] is True
    assert payload["max_rel_err"] < 1e-4


def test_ablate_emits_table(tmp_path):
    code = run(["--out-dir", tmp_path, "ablate", "--rows", "A0,A4,A6",
                "--seeds", "0,1,2", "--epochs", "1", *TINY,
                "--synth-n", "32"])
    assert code == 0
    table = json.loads((tmp_path / "ablation.json").read_text())
    assert [r["row"] for r in table] == ["A0", "A4", "A6"]
    assert all(r["seeds"] == [0, 1, 2] for r in table)
    csv_lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 4


def test_export_traces_round_trips_columns(tmp_path):
    assert run(["--out-dir", tmp_path, "train", "--epochs", "1",
                *TINY, *TINY_DATA]) == 0
    assert run(["--out-dir", tmp_path, "export-traces"]) == 0
    lines = (tmp_path / "traces.csv").read_text().splitlines()
    header = lines[0].split(",")
    first_rec = json.loads((tmp_path / "trace.jsonl").read_text().splitlines()[0])
    assert set(header) == set(first_rec.keys())
    assert len(lines) == 1 + len((tmp_path / "trace.jsonl").read_text().splitlines())


def test_export_traces_without_run_is_error(tmp_path):
    assert run(["--out-dir", tmp_path / "nothing", "export-traces"]) == 2


def test_out_dir_env_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("TRIFUSE_OUT_DIR", str(tmp_path / "env_runs"))
    assert run(["train", "--epochs", "1", *TINY, *TINY_DATA]) == 0
    assert (tmp_path / "env_runs" / "trace.jsonl").exists()


def test_help_lists_reference_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "default: 1.0" in text       # alpha / beta / lambda_recon
    assert "default: 0.5" in text       # eta / lambda_uni
    assert "default: 0.1" in text       # lambda_div / lambda_stat / warmup
    assert "--window-start" in text and "default: 0" in text
    assert "--window-end" in text and "default: 25" in text


def test_subcommand_helps_exit_zero(capsys):
    for cmd in ("gen-data", "train", "eval", "ablate", "gradcheck", "export-traces"):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0
        capsys.readouterr()
