import csv
import json
import subprocess
import sys

import pytest

from cutoseen.cli import ConfigError, load_config, main, run


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_taylor_run_writes_table(tmp_path):
    cfg = _write(tmp_path, "[run]\ncase = taylor\nN = 10, 20, 40, 80\n[physics]\nmu = 0.1\n")
    assert run(cfg, tmp_path / "out", quiet=True) == 0
    rows = _rows(tmp_path / "out" / "convergence.csv")
    assert len(rows) == 4
    eoc_cols = [c for c in rows[0] if c.startswith("eoc_")]
    assert len(eoc_cols) == 6
    assert all(rows[-1][c] for c in eoc_cols)
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["run"]["N"] == "10, 20, 40, 80"
    assert summary["result"]["max_residual"] <= 1e-10


def test_patch_run_reports_residual_and_vtk(tmp_path):
    cfg = _write(tmp_path, "[run]\ncase = patch\nN = 8\nemit_vtk = true\n[geometry]\ncenter = 0.5123, 0.4987\nradius = 0.4\n")
    assert run(cfg, tmp_path / "o", quiet=True) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["result"]["max_residual"] <= 1e-10
    assert summary["result"]["rows"][0]["errors"]["u_L2"] <= 1e-10
    assert (tmp_path / "o" / "fields_N8.vtk").read_text().startswith("# vtk DataFile")


@pytest.mark.parametrize(
    "text, key",
    [
        ("[run]\ncase = taylor\nbogus = 1\n", "run.bogus"),
        ("[run]\ncase = taylor\n[physics]\nmu = abc\n", "physics.mu"),
        ("[run]\nk = 1\n", "run.case"),
        ("[run]\ncase = taylor\nk = 3\n", "run.k"),
        ("[run]\ncase = taylor\n[weird]\nx = 1\n", "weird"),
        ("[run]\ncase = taylor\n[physics]\nmu = -1\n", "physics.mu"),
    ],
)
def test_malformed_config_exits_2_naming_key(tmp_path, capsys, text, key):
    cfg = _write(tmp_path, text)
    assert run(cfg, tmp_path / "o", quiet=True) == 2
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "config" and record["key"] == key


def test_load_config_rejects_unknown_key(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(_write(tmp_path, "[stabilization]\ngama = 3\n[run]\ncase = taylor\n"))
    assert info.value.key == "stabilization.gama"


def test_default_stabilization_constants(tmp_path):
    cfg = load_config(_write(tmp_path, "[run]\ncase = taylor\n"))
    s = cfg.stabilization()
    assert (s.gamma, s.gamma_beta, s.gamma_p, s.gamma_mu, s.gamma_sigma) == (30.0, 0.05, 0.05, 0.05, 0.001)
    assert s.gamma_u == pytest.approx(0.0025)
    assert s.c_u == pytest.approx(1 / 6) and s.c_sigma == pytest.approx(1 / 12)


def test_reruns_are_byte_identical(tmp_path):
    text = "[run]\ncase = taylor\nN = 6, 10\n[geometry]\nsweep_N = 8\nsweep_offsets = 0, 0.3\n"
    cfg = _write(tmp_path, text)
    assert run(cfg, tmp_path / "a", quiet=True) == 0
    assert run(cfg, tmp_path / "b", quiet=True) == 0
    for name in ("convergence.csv", "sweep.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert b"\r" not in a


def test_custom_level_set(tmp_path):
    text = "[run]\ncase = custom-level-set\nN = 8, 12\n[geometry]\nexpression = maximum(abs(x - 0.51), abs(y - 0.49)) - 0.35\n"
    assert run(_write(tmp_path, text), tmp_path / "o", quiet=True) == 0
    rows = _rows(tmp_path / "o" / "convergence.csv")
    assert len(rows) == 2 and float(rows[1]["u_L2"]) < float(rows[0]["u_L2"])


def test_custom_expression_is_sandboxed(tmp_path):
    text = "[run]\ncase = custom-level-set\nN = 8\n[geometry]\nexpression = __import__('os').getcwd()\n"
    assert run(_write(tmp_path, text), tmp_path / "o", quiet=True) != 0


def test_transient_cavity_run(tmp_path):
    text = (
        "[run]\ncase = transient-cavity\nN = 10\nemit_vtk = true\n"
        "[physics]\nmu = 0.008\ndt = 0.01\nsteps = 4\nramp_time = 0.1\n"
        "[geometry]\ncenter = 0.513, 0.507\nhalf_width = 0.4\n[output]\nvtk_stride = 2\n"
    )
    assert run(_write(tmp_path, text), tmp_path / "o", quiet=True) == 0
    rows = _rows(tmp_path / "o" / "timeseries.csv")
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert sorted(p.name for p in (tmp_path / "o").glob("*step*.vtk")) == [
        "fields_N10_step00002.vtk",
        "fields_N10_step00004.vtk",
    ]
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["result"]["reynolds"] == pytest.approx(100.0)


def test_main_entry_point(tmp_path):
    cfg = _write(tmp_path, "[run]\ncase = patch\nN = 6\n")
    assert main(["run", str(cfg), "--out", str(tmp_path / "m"), "--quiet"]) == 0
    proc = subprocess.run(
        [sys.executable, "-m", "cutoseen.cli", "run", str(tmp_path / "missing.ini"), "--quiet"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2 and '"error": "config"' in proc.stderr
