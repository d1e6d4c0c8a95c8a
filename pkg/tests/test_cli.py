"""Config parsing, the four subcommands, and artifact reproducibility."""

import json
import os

import numpy as np
import pytest

from unrolldd import cli
from unrolldd import oracle


MINIMAL = """\
[run]
epochs = 2

[inner]
steps = 3
alpha = 0.1
"""

TINY_RUN = """\
[run]
strategy = t-bptt
epochs = 2
master_seed = 3

[data]
task = blobs
classes = 2
per_class = 24
dim = 4
separation = 2.5

[model]
widths = 4

[inner]
steps = 3
alpha = 0.1

[schedule]
window = 2
window_range = 1

[outer]
lr = 0.05
val_batch = 8
eval_seeds = 2
eval_steps = 10
"""


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- config loading --------------------------------------------------------

def test_minimal_config_fills_defaults(tmp_path):
    cfg = cli.load_config(_write(tmp_path, MINIMAL))
    assert cfg["run"]["epochs"] == 2
    assert cfg["run"]["strategy"] == "at-bptt"
    assert cfg["schedule"]["window"] == 8
    assert cfg["data"]["task"] == "blobs"
    assert cfg["outer"]["eval_optimizer"] == "adam"
    assert cfg["data"]["fractions"] == (0.6, 0.2, 0.2)


def test_unknown_key_cites_file_and_line(tmp_path):
    path = _write(tmp_path, "[run]\nepochs = 2\nbogus = 1\n\n[inner]\nsteps = 3\nalpha = 0.1\n")
    with pytest.raises(cli.ConfigError, match=r"run\.ini:3"):
        cli.load_config(path)


def test_unknown_section_cites_line(tmp_path):
    path = _write(tmp_path, MINIMAL + "\n[mystery]\nx = 1\n")
    with pytest.raises(cli.ConfigError, match="mystery"):
        cli.load_config(path)


def test_bad_value_reports_key(tmp_path):
    path = _write(tmp_path, "[run]\nepochs = soon\n\n[inner]\nsteps = 3\nalpha = 0.1\n")
    with pytest.raises(cli.ConfigError, match="epochs"):
        cli.load_config(path)


def test_missing_required_key(tmp_path):
    path = _write(tmp_path, "[run]\nepochs = 2\n\n[inner]\nsteps = 3\n")
    with pytest.raises(cli.ConfigError, match="alpha"):
        cli.load_config(path)


def test_write_resolved_reparses_identically(tmp_path):
    cfg = cli.load_config(_write(tmp_path, TINY_RUN))
    out = tmp_path / "resolved.ini"
    cli.write_resolved(str(out), cfg)
    again = cli.load_config(str(out))
    assert again == cfg


# -- distill ---------------------------------------------------------------

def test_distill_writes_artifacts(tmp_path, capsys):
    config = _write(tmp_path, TINY_RUN)
    out = tmp_path / "run1"
    assert cli.main(["distill", "--config", config, "--out", str(out)]) == 0
    for name in ("config.resolved.ini", "epochs.csv", "report.json",
                 "synthetic.png", "synthetic.npz", "synthetic.sha256"):
        assert (out / name).exists(), name
    printed = capsys.readouterr().out
    assert "distilled accuracy" in printed
    assert "baseline accuracy" in printed

    report = json.loads((out / "report.json").read_text())
    assert report["report"]["epochs"] == 2
    assert "baseline_eval" in report

    lines = (out / "epochs.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,stage,strategy")
    assert len(lines) == 3


def test_distill_rerun_is_byte_identical(tmp_path):
    config = _write(tmp_path, TINY_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["distill", "--config", config, "--out", str(a)]) == 0
    assert cli.main(["distill", "--config", config, "--out", str(b)]) == 0
    assert (a / "epochs.csv").read_bytes() == (b / "epochs.csv").read_bytes()
    assert (a / "synthetic.sha256").read_bytes() == (b / "synthetic.sha256").read_bytes()
    assert (a / "config.resolved.ini").read_bytes() == (b / "config.resolved.ini").read_bytes()


def test_out_root_env_names_run_dir(tmp_path, monkeypatch):
    config = _write(tmp_path, TINY_RUN, name="envy.ini")
    root = tmp_path / "root"
    monkeypatch.setenv("UNROLLDD_OUT_ROOT", str(root))
    monkeypatch.chdir(tmp_path)
    assert cli.main(["distill", "--config", config]) == 0
    assert (root / "envy-seed3" / "epochs.csv").exists()


def test_seed_override_changes_run(tmp_path, monkeypatch):
    config = _write(tmp_path, TINY_RUN, name="seedy.ini")
    root = tmp_path / "root"
    monkeypatch.setenv("UNROLLDD_OUT_ROOT", str(root))
    assert cli.main(["distill", "--config", config, "--seed", "7"]) == 0
    run_dir = root / "seedy-seed7"
    assert run_dir.exists()
    resolved = (run_dir / "config.resolved.ini").read_text()
    assert "master_seed = 7" in resolved


def test_distill_missing_config_errors(tmp_path, capsys):
    code = cli.main(["distill", "--config", str(tmp_path / "absent.ini")])
    assert code in (1, 2)
    assert capsys.readouterr().err


# -- eval ------------------------------------------------------------------

def test_eval_reuses_saved_synthetic(tmp_path, capsys):
    config = _write(tmp_path, TINY_RUN)
    out = tmp_path / "run"
    assert cli.main(["distill", "--config", config, "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--config", config, "--out", str(out)]) == 0
    assert "accuracy" in capsys.readouterr().out
    payload = json.loads((out / "eval.json").read_text())
    assert len(payload["eval"]["per_seed"]) == 2
    # retraining on the dumped set reproduces the in-run final evaluation
    report = json.loads((out / "report.json").read_text())
    assert payload["eval"]["mean"] == pytest.approx(
        report["report"]["final_eval"]["mean"]
    )


def test_eval_rejects_tampered_sidecar(tmp_path, capsys):
    config = _write(tmp_path, TINY_RUN)
    out = tmp_path / "run"
    assert cli.main(["distill", "--config", config, "--out", str(out)]) == 0
    blob = np.load(out / "synthetic.npz")
    np.savez(out / "synthetic.npz", images=blob["images"] + 0.5,
             labels=blob["labels"], classes=blob["classes"], ipc=blob["ipc"])
    capsys.readouterr()
    assert cli.main(["eval", "--config", config, "--out", str(out)]) == 1
    assert "checksum" in capsys.readouterr().err


# -- verify ----------------------------------------------------------------

def test_verify_prints_checks_and_writes_json(tmp_path, capsys):
    assert cli.main(["verify", "--level", "fast", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert printed.count("[PASS]") == 6
    payload = json.loads((tmp_path / "verify.json").read_text())
    assert payload["ok"] is True


def test_verify_failure_exit_code(monkeypatch, capsys):
    fake = {"level": "fast", "ok": False, "elapsed_s": 0.0,
            "checks": [{"name": "x", "error": 1.0, "tolerance": 0.0,
                        "passed": False, "exception": None}]}
    monkeypatch.setattr(oracle, "verify_suite", lambda level: fake)
    assert cli.main(["verify"]) == 1
    assert "[FAIL]" in capsys.readouterr().out


# -- bench -----------------------------------------------------------------

def test_bench_emits_cost_table(tmp_path, capsys):
    assert cli.main(["bench", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == ",".join(cli.BENCH_COLUMNS)
    rows = [dict(zip(cli.BENCH_COLUMNS, ln.split(","))) for ln in lines[1:]]
    assert {r["route"] for r in rows} == {"lrha", "dense", "ratio"}
    assert {r["p"] for r in rows} == {"200", "1000"}
    for r in rows:
        if r["route"] == "ratio":
            assert 0.0 < float(r["madds"]) < 1.0
            assert 0.0 < float(r["peak_extra_floats"]) < 1.0
    printed = capsys.readouterr().out
    assert "madds ratio" in printed
