import csv
import json
import subprocess
import sys

import pytest

from torus_kpz.cli import EXIT_ACCEPT, EXIT_CONFIG, main

SMALL = """\
grid.n = 32
scheme.dt = 0.001
run.t_end = 0.2
run.replicas = 4
invariant.samples = 8
invariant.burn_in = 0.2
invariant.thinning = 0.1
gamma.t_avg = 0.2
coupling.window = 0.1,0.2
coupling.every = 0.01
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_zero_noise(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL + "noise.kind = none\nrun.times = 0.05,0.1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_rows(tmp_path / "o" / "trajectory.csv")
    assert [float(r["t"]) for r in rows] == [0.0, 0.05, 0.1, 0.2]
    assert all(float(r["logZ"]) == 0.0 for r in rows)
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["command"] == "simulate" and "trajectory.csv" in man["outputs"]
    assert "logZ = 0" in capsys.readouterr().out


def test_simulate_twice_identical(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--seed", "5", "--out", str(tmp_path / d)]) == 0
    for f in ("trajectory.csv", "u_final.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_json_format(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o"), "--format", "json"]) == 0
    rows = json.loads((tmp_path / "o" / "trajectory.json").read_text())
    assert rows[0]["t"] == 0.0


def test_white_step_too_large(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "noise.kind = white\nscheme.name = fd_euler_white\ngrid.n = 64\nscheme.dt = 0.001\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "h^2/4" in capsys.readouterr().err


def test_gamma_constant_noise(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SMALL + "noise.coeffs = 0:1\n")
    assert main(["gamma", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert "gamma = 0.5000 +/- 0.0000" in capsys.readouterr().out
    rep = json.loads((tmp_path / "o" / "gamma.json").read_text())
    assert rep["gamma"]["value"] == pytest.approx(0.5, abs=1e-12)


def test_sigma_without_gamma_artifact(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["sigma", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["sigma", "--config", cfg, "--out", str(tmp_path / "o"), "--gamma", "nope.json"]) == EXIT_CONFIG


def test_sigma_with_gamma_artifact(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "noise.coeffs = 0:1\nrun.replicas = 8\ncorrector.states = 2\ncorrector.n_mc = 2\n")
    assert main(["gamma", "--config", cfg, "--out", str(tmp_path / "g")]) == 0
    code = main(["sigma", "--config", cfg, "--out", str(tmp_path / "s"), "--gamma", str(tmp_path / "g" / "gamma.json")])
    assert code in (0, EXIT_ACCEPT)
    rep = json.loads((tmp_path / "s" / "sigma.json").read_text())
    assert rep["sigma2_qv"]["value"] == pytest.approx(1.0, abs=1e-12)


def test_coupling_invariant_corrector(tmp_path):
    cfg = write_cfg(tmp_path, SMALL)
    assert main(["coupling", "--config", cfg, "--out", str(tmp_path / "c")]) in (0, EXIT_ACCEPT)
    assert (tmp_path / "c" / "coupling_fit.json").exists()
    assert main(["invariant", "--config", cfg, "--out", str(tmp_path / "i")]) == 0
    assert len(read_rows(tmp_path / "i" / "invariant_samples.csv")) == 8
    assert main(["corrector", "--config", cfg, "--out", str(tmp_path / "k")]) == 0
    rep = json.loads((tmp_path / "k" / "corrector.json").read_text())
    assert rep["orthogonality_check"]["passed"]


def test_clt_exit_codes(tmp_path):
    base = SMALL + "noise.coeffs = 0:1\nrun.replicas = 150\nrun.t_end = 1.0\nscheme.dt = 0.01\n"
    cfg = write_cfg(tmp_path, base)
    assert main(["clt", "--config", cfg, "--out", str(tmp_path / "ok")]) == 0
    summary = json.loads((tmp_path / "ok" / "summary.json").read_text())
    assert summary["gamma"] == pytest.approx(0.5, abs=1e-12)
    bad = tmp_path / "gamma_bad.json"
    bad.write_text(json.dumps({"gamma": {"value": 3.0, "stderr": 0.0}}))
    assert main(["clt", "--config", cfg, "--out", str(tmp_path / "bad"), "--gamma", str(bad)]) == EXIT_ACCEPT


def test_clt_too_few_replicas_is_config_error(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "noise.coeffs = 0:1\n")
    assert main(["clt", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_seed_precedence(tmp_path, monkeypatch):
    no_seed = write_cfg(tmp_path, SMALL, "a.cfg")
    with_seed = write_cfg(tmp_path, SMALL + "seed = 9\n", "b.cfg")
    monkeypatch.setenv("TORUS_KPZ_SEED", "42")

    def seed_of(args):
        main(["simulate", "--out", str(tmp_path / "o")] + args)
        return json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"]

    assert seed_of(["--config", no_seed]) == 42
    assert seed_of(["--config", with_seed]) == 9
    assert seed_of(["--config", with_seed, "--seed", "3"]) == 3
    monkeypatch.setenv("TORUS_KPZ_SEED", "x")
    assert main(["simulate", "--config", no_seed, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "noise.kind = none\n")
    res = subprocess.run([sys.executable, "-m", "torus_kpz", "simulate", "--config", cfg, "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    bad = subprocess.run([sys.executable, "-m", "torus_kpz", "nonsense"], capture_output=True, text=True)
    assert bad.returncode == 2
