import csv
import json
import subprocess
import sys

import pytest

from fbmsmp.cli import main
from fbmsmp.config import ExperimentConfig
from fbmsmp.runner import COMMANDS, NotFoundError, emit_plot_data, run

SMALL = {"m_paths": 300, "n_steps": 16, "scaling_steps": 32, "seed": 3}


def small(problem="lq_basic", **kw):
    return ExperimentConfig.from_dict({"problem": problem, **SMALL, **kw})


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_trivial_problem_with_one_path(tmp_path):
    cfg = ExperimentConfig.from_dict({"problem": "zero", "m_paths": 1, "n_steps": 8})
    for cmd in ("simulate", "cost", "solve-bsde"):
        rec = run(cfg, cmd, tmp_path)
        print(cmd, rec.checks)
        assert (tmp_path / rec.fingerprint / "report.json").exists()
        assert rec.passed


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_every_command_writes_a_record(tmp_path, command):
    cfg = small("classical_h_half", policy=0.5) if command == "reduce-classical" else small()
    rec = run(cfg, command, tmp_path)
    out = tmp_path / rec.fingerprint
    report = json.loads((out / "report.json").read_text())
    assert report["command"] == command and report["checks"] == rec.checks
    assert json.loads((out / "config.json").read_text()) == cfg.to_dict()
    for kind in rec.tables:
        assert (out / "tables" / f"{kind}.csv").exists()


def test_records_are_deterministic(tmp_path):
    cfg = small(policy=0.0)
    a = run(cfg, "verify-mp", tmp_path / "a")
    b = run(cfg, "verify-mp", tmp_path / "b")
    assert json.dumps(a.payload(timestamps=False), sort_keys=True) == json.dumps(b.payload(timestamps=False),
                                                                                 sort_keys=True)
    assert a.tables == b.tables


def test_plot_data_formats(tmp_path):
    cov = run(small(), "sample-fbm", tmp_path)
    rows = read_csv(emit_plot_data(cov, "covariance", tmp_path / "plots"))
    assert list(rows[0]) == ["t", "s", "empirical", "exact", "diff"] and len(rows) == 17 * 17
    sc = run(small(m_paths=2000), "scaling", tmp_path)
    rows = read_csv(emit_plot_data(sc, "scaling", tmp_path / "plots"))
    assert list(rows[0]) == ["epsilon", "moment", "value", "fitted"]
    vi = run(small(), "verify-mp", tmp_path)
    rows = read_csv(emit_plot_data(vi, "vi", tmp_path / "plots"))
    assert list(rows[0]) == ["tau", "candidate", "theta", "se"]
    with pytest.raises(NotFoundError):
        emit_plot_data(cov, "scaling", tmp_path)


def test_unknown_command(tmp_path):
    with pytest.raises(NotFoundError):
        run(small(), "fly", tmp_path)


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["cost", "--problem", "lq_basic", "--paths", "500", "--steps", "16", "--out", out]) == 0
    assert main(["cost", "--problem", "nope", "--out", out]) == 2
    assert main(["cost", "--out", out]) == 2
    assert main(["verify-mp", "--problem", "quadratic_phi", "--out", out]) == 2
    # a clearly non-optimal control fails the variational inequality
    assert main(["verify-mp", "--problem", "lq_basic", "--policy", "0", "--paths", "3000", "--steps", "32",
                 "--out", out]) == 1
    assert "config error" in capsys.readouterr().err


def test_cli_overrides_reach_the_config(tmp_path, capsys):
    from pathlib import Path
    cfg = Path(__file__).parents[1] / "configs" / "lq_basic.json"
    main(["simulate", "--config", str(cfg), "--seed", "11", "--paths", "50", "--steps", "8", "--hurst", "0.2",
          "--sigma", "0.1", "--out", str(tmp_path), "--quiet"])
    report = capsys.readouterr().out.strip()
    conf = json.loads((tmp_path / report.split("/")[-2] / "config.json").read_text())
    assert conf["seed"] == 11 and conf["m_paths"] == 50 and conf["n_steps"] == 8
    assert conf["params"]["h"] == 0.2 and conf["params"]["sigma"] == 0.1 and conf["params"]["gamma"] == 2.0


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fbmsmp.cli", "sample-fbm", "--problem", "zero", "--paths", "2000",
                          "--steps", "16", "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["checks"]["covariance"]


def test_export_paths(tmp_path):
    from fbmsmp.fbm import PathEnsemble
    rec = run(small(export_paths=True), "simulate", tmp_path)
    ens = PathEnsemble.from_npz(tmp_path / rec.fingerprint / "ensemble.npz")
    assert ens.m_paths == SMALL["m_paths"]
