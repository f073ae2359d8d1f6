import json

import pytest

from defix.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_PRECONDITION, build_parser, main


def test_global_flags_before_or_after_command():
    p = build_parser()
    assert p.parse_args(["--seed", "3", "collect"]).seed == 3
    assert p.parse_args(["collect", "--seed", "4", "--out", "x"]).out == "x"
    with pytest.raises(SystemExit):
        p.parse_args(["evaluate", "--mode", "bogus"])


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("sim:\n  dt: -1\n")
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "s")]) == EXIT_CONFIG
    assert "sim.dt" in capsys.readouterr().err
    assert main(["report", "--seed", "-1", "--out", str(tmp_path / "s")]) == EXIT_CONFIG


def test_missing_artifact_exit_code(tmp_path):
    assert main(["train-il", "--out", str(tmp_path)]) == EXIT_MISSING
    assert main(["report", "--out", str(tmp_path)]) == EXIT_MISSING


def test_precondition_exit_code(tmp_path):
    manifest = {"version": 1, "artifacts": {}, "commands": [], "run": {"config_hash": "other", "seed": 0}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    assert main(["train-il", "--out", str(tmp_path)]) == EXIT_PRECONDITION
