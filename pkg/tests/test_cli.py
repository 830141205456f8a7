import json
import os
import subprocess
import sys

import pytest
import yaml

from kinstretch import cli


def run(argv):
    return cli.main([str(a) for a in argv])


def test_cap_lemma_example(tmp_path, capsys):
    code = run(["verify-stretching", "--lemma", "cap", "--eps", 0.5, "--L", 1, "--M", 2, "--T", 1,
                "--samples", 100000, "--seed", 7, "--out", tmp_path])
    assert code == 0
    rep = json.loads((tmp_path / "verify_single_bounce_cap.json").read_text())
    assert rep["violations"] == 0 and rep["passed"]
    assert "verify_single_bounce_cap" in capsys.readouterr().out


def test_nu_bounds_example(tmp_path):
    assert run(["kernel-bounds", "--check", "nu-bounds", "--out", tmp_path]) == 0


def test_same_seed_same_csv(tmp_path):
    argv = ["verify-stretching", "--lemma", "lateral", "--eps", 0.2, "--samples", 20000, "--seed", 11]
    assert run(argv + ["--out", tmp_path / "a"]) == 0
    assert run(argv + ["--out", tmp_path / "b"]) == 0
    a = (tmp_path / "a" / "verify_single_bounce_lateral.csv").read_bytes()
    b = (tmp_path / "b" / "verify_single_bounce_lateral.csv").read_bytes()
    assert a == b and len(a) > 0


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"verify-stretching": {"bogus": 1}}))
    assert run(["verify-stretching", "--config", cfg, "--out", tmp_path]) == 2
    assert "bogus" in capsys.readouterr().err


def test_bad_seed_and_lemma(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"seed": -3}))
    assert run(["verify-stretching", "--config", cfg, "--out", tmp_path]) == 2
    cfg.write_text(yaml.safe_dump({"verify-stretching": {"lemma": "nope"}}))
    assert run(["verify-stretching", "--config", cfg, "--out", tmp_path]) == 2


def test_precedence_defaults_config_flags(tmp_path):
    cfg = {"seed": 5, "verify-stretching": {"eps": 0.3, "samples": 100}}
    p = cli.build_parser()
    args = p.parse_args(["verify-stretching", "--samples", "50"])
    vals = cli.resolve("verify-stretching", args, cfg)
    assert vals["seed"] == 5 and vals["eps"] == 0.3 and vals["samples"] == 50
    assert vals["M"] == cli.DEFAULTS["verify-stretching"]["M"]


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    args = cli.build_parser().parse_args(["jacobian"])
    assert cli.resolve("jacobian", args, {})["out"] == str(tmp_path / "env")
    args = cli.build_parser().parse_args(["jacobian", "--out", "x"])
    assert cli.resolve("jacobian", args, {})["out"] == "x"


def test_eps_list_parsing():
    args = cli.build_parser().parse_args(["decay-linear", "--eps", "0.4,0.2"])
    assert cli.resolve("decay-linear", args, {})["eps"] == [0.4, 0.2]


def test_report_subcommand(tmp_path, capsys):
    assert run(["verify-stretching", "--lemma", "circle", "--out", tmp_path]) == 0
    capsys.readouterr()
    assert run(["report", "--out", tmp_path]) == 0
    assert "verify_circle_chain" in capsys.readouterr().out
    assert run(["report", "--out", tmp_path / "empty"]) == 2


def test_console_script_entry_point(tmp_path):
    # the installed entry point and the module run agree
    r = subprocess.run([sys.executable, "-m", "kinstretch.cli", "verify-stretching", "--lemma", "circle",
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert os.path.exists(tmp_path / "verify_circle_chain.csv")
