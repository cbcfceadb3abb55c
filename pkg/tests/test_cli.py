import csv
import json
import subprocess
import sys

import pytest

from logem import __version__
from logem.cli import load_config, main
from tests.conftest import CONFIGS

FAST = ["--set", "experiment.paths=200"]


def _rows(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.mark.parametrize("name", ["gle", "sis", "cir", "cev"])
def test_shipped_configs_validate(name):
    cp = load_config(str(CONFIGS / f"{name}.cfg"))
    assert cp.get("run", "seed") == "1"
    assert cp.get("experiment", "paths") == "5000"


def test_converge_gle_writes_six_rows(tmp_path, capsys):
    assert main(["converge", "--config", str(CONFIGS / "gle.cfg"), "--out", str(tmp_path), *FAST]) == 0
    rows = _rows(tmp_path / "errors.csv")
    assert len(rows) == 6
    assert [float(r["delta"]) for r in rows] == [2.0**-k for k in range(6, 12)]
    assert all(float(r["error"]) > 0 for r in rows)
    first = (tmp_path / "errors.csv").read_text().splitlines()[0]
    assert first.startswith(f"# logem {__version__} config-sha256=")
    rate = _rows(tmp_path / "rate.csv")[0]
    assert 0.5 < float(rate["slope"]) < 1.5
    pos = _rows(tmp_path / "positivity.csv")
    assert pos == [{"scheme": "log-te", "violations": "0", "paths": "200"}]
    assert "GLE log-te: slope" in capsys.readouterr().out


def test_converge_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["converge", "--config", str(CONFIGS / "sis.cfg"), *FAST, "--set", "experiment.levels=6-8",
            "--set", "experiment.ref_level=10"]
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b), "--workers", "2"]) == 0
    for f in ("errors.csv", "rate.csv", "positivity.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_seed_flag_changes_output_and_hash(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["converge", "--config", str(CONFIGS / "gle.cfg"), *FAST, "--set", "experiment.levels=6-7"]
    main([*args, "--out", str(a)])
    main([*args, "--out", str(b), "--seed", "2"])
    ta, tb = (a / "errors.csv").read_text(), (b / "errors.csv").read_text()
    assert ta.splitlines()[0] != tb.splitlines()[0]
    assert ta.splitlines()[2:] != tb.splitlines()[2:]


def test_simulate_cir(tmp_path, capsys):
    args = ["simulate", "--config", str(CONFIGS / "cir.cfg"), "--out", str(tmp_path),
            "--set", "simulate.paths=300", "--set", "simulate.fine_level=8"]
    assert main(args) == 0
    traj = _rows(tmp_path / "trajectories.csv")
    schemes = {r["scheme"] for r in traj}
    assert schemes == {"log-te", "sre", "em"}
    assert all(float(r["value"]) > 0 for r in traj if r["scheme"] != "em")
    pos = {r["scheme"]: int(r["violations"]) for r in _rows(tmp_path / "positivity.csv")}
    assert pos["log-te"] == 0 and pos["sre"] == 0 and pos["em"] > 0
    assert "violations" in capsys.readouterr().out


def test_feller_cir_attainable(tmp_path, capsys):
    args = ["feller", "--config", str(CONFIGS / "cir.cfg"), "--out", str(tmp_path),
            "--set", "model.theta=3", "--set", "feller.boundary=lower"]
    assert main(args) == 0
    assert capsys.readouterr().out.strip() == "lower boundary: attainable"
    rows = _rows(tmp_path / "feller_lower.csv")
    assert len(rows) == 12 and rows[0]["ratio"] == "nan"


def test_feller_both_boundaries(tmp_path, capsys):
    assert main(["feller", "--config", str(CONFIGS / "gle.cfg"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == ["lower boundary: unattainable", "upper boundary: unattainable"]


def test_probe_cev(tmp_path, capsys):
    assert main(["probe", "--config", str(CONFIGS / "cev.cfg"), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    m_hat = float(out.split("m_hat ")[1].split(",")[0])
    assert m_hat <= 4 / 3 + 0.1
    assert len(_rows(tmp_path / "probe.csv")) == 9


def test_unknown_key_rejected(tmp_path, capsys):
    code = main(["converge", "--config", str(CONFIGS / "gle.cfg"), "--out", str(tmp_path),
                 "--set", "experiment.pathz=10"])
    assert code == 2
    e = _err(capsys)
    assert e["error"] == "config" and "pathz" in e["message"]
    assert not (tmp_path / "errors.csv").exists()


def test_unknown_section_rejected(tmp_path, capsys):
    assert main(["probe", "--config", str(CONFIGS / "gle.cfg"), "--set", "solver.x=1"]) == 2
    assert "solver" in _err(capsys)["message"]


def test_unknown_model_parameter(tmp_path, capsys):
    assert main(["probe", "--config", str(CONFIGS / "gle.cfg"), "--set", "model.alpha=1"]) == 2
    assert "alpha" in _err(capsys)["message"]


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nname = GLE\nthis line has no separator\n")
    assert main(["probe", "--config", str(bad)]) == 2
    assert _err(capsys)["error"] == "config"
    assert main(["probe", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert _err(capsys)["error"] == "config"
    nomodel = tmp_path / "nomodel.cfg"
    nomodel.write_text("[run]\nseed = 1\n")
    assert main(["probe", "--config", str(nomodel)]) == 2
    assert "[model]" in _err(capsys)["message"]


def test_bad_values(tmp_path, capsys):
    cfg = str(CONFIGS / "cir.cfg")
    assert main(["converge", "--config", cfg, "--set", "model.theta=3", "--out", str(tmp_path)]) == 2
    e = _err(capsys)
    assert e["error"] == "parameter" and "attainable" in e["message"]
    assert main(["converge", "--config", cfg, "--set", "experiment.paths=many", "--out", str(tmp_path)]) == 2
    assert _err(capsys)["error"] == "config"
    assert main(["converge", "--config", cfg, "--set", "experiment.scheme=rk4", "--out", str(tmp_path)]) == 2
    assert "rk4" in _err(capsys)["message"]
    assert main(["converge", "--config", cfg, "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["converge", "--config", cfg, "--workers", "0", "--out", str(tmp_path)]) == 2
    assert main(["converge", "--config", cfg, "--set", "experiment.ref_level=10", "--out", str(tmp_path)]) == 2
    assert _err(capsys)["error"] == "validation"


def test_bad_output_directory(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["probe", "--config", str(CONFIGS / "gle.cfg"), "--out", str(blocker / "sub")]) == 2
    assert "output directory" in _err(capsys)["message"]


def test_fractional_parameters_and_level_lists(tmp_path):
    args = ["converge", "--config", str(CONFIGS / "cev.cfg"), "--out", str(tmp_path), *FAST,
            "--set", "model.alpha=7/8", "--set", "experiment.levels=5, 7", "--set", "experiment.ref_level=9"]
    assert main(args) == 0
    assert len(_rows(tmp_path / "errors.csv")) == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "logem", "probe", "--config", str(CONFIGS / "gle.cfg"),
                        "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0 and "m_hat" in r.stdout
