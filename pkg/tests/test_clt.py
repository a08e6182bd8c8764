import json

import numpy as np
import pytest

from torus_kpz import clt as clt_mod
from torus_kpz.clt import (
    CltSample,
    TooFewSamples,
    TooManyFailures,
    check_failures,
    logU_gap_check,
    normality_report,
    read_samples_csv,
    rescaled,
    run_replicas,
    variance_ratio,
    write_json,
    write_samples_csv,
)
from torus_kpz.errors import BlowUp, ConfigError
from torus_kpz.noise import ZeroNoise
from torus_kpz.she import SchemeConfig


def test_zero_noise_replicas(g32):
    cfg = SchemeConfig(g32, 1e-2)
    rr = run_replicas("uniform", [0.5, 1.0], ZeroNoise(), cfg, 4, seed=1)
    assert len(rr.samples) == 8
    assert all(s.log_Z == 0 for s in rr.samples)
    assert [s.replica for s in rr.samples] == [0, 0, 1, 1, 2, 2, 3, 3]
    gap = logU_gap_check(rr.samples)
    assert max(gap.mean_gap) < 1e-13


def test_needs_two_replicas(g32, smooth):
    with pytest.raises(ConfigError):
        run_replicas("uniform", [0.1], smooth, SchemeConfig(g32, 1e-3), 1, seed=1)


def test_deterministic_and_chunk_independent(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    a = run_replicas("uniform", [0.2], smooth, cfg, 7, seed=3, chunk=3)
    b = run_replicas("uniform", [0.2], smooth, cfg, 7, seed=3, chunk=3)
    assert a.samples == b.samples
    c = run_replicas("uniform", [0.2], smooth, cfg, 7, seed=3, chunk=7)
    assert np.allclose([s.log_Z for s in a.samples], [s.log_Z for s in c.samples], atol=1e-13)


def test_workers_give_identical_samples(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    a = run_replicas("uniform", [0.1], smooth, cfg, 6, seed=4, chunk=2, workers=1)
    b = run_replicas("uniform", [0.1], smooth, cfg, 6, seed=4, chunk=2, workers=3)
    assert a.samples == b.samples


def test_failed_replicas_are_isolated(g32, smooth, monkeypatch):
    real_run = clt_mod.run

    def flaky(init, t_end, spec, cfg, path, **kw):
        if 2 in path.replicas:
            raise BlowUp("synthetic")
        return real_run(init, t_end, spec, cfg, path, **kw)

    monkeypatch.setattr(clt_mod, "run", flaky)
    rr = run_replicas("uniform", [0.1], smooth, SchemeConfig(g32, 1e-3), 5, seed=1, chunk=5)
    assert rr.failed == [2]
    assert sorted({s.replica for s in rr.samples}) == [0, 1, 3, 4]
    with pytest.raises(TooManyFailures):
        check_failures(rr)


def test_probe_values_are_log_U(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    rr = run_replicas(("dirac", 0.0), [0.1], smooth, cfg, 2, seed=2, probes=(0.0, 0.5))
    s = rr.samples[0]
    # log U = log u + log Z, and the density peaks where the mass started
    assert s.log_U[0] > s.log_U[1]
    assert s.zeta(0.6) == pytest.approx(s.log_Z + 0.06)


def test_normality_null_passes_mostly():
    rng = np.random.default_rng(0)
    ok = sum(normality_report(rng.normal(size=500), 1.0).ks_pvalue > 0.01 for _ in range(100))
    assert ok >= 95


def test_normality_detects_shift():
    rng = np.random.default_rng(1)
    rep = normality_report(rng.normal(1.0, 1.0, 2000), 1.0)
    assert rep.ks_pvalue < 0.01


def test_normality_report_fields():
    rng = np.random.default_rng(2)
    rep = normality_report(rng.normal(size=300), 1.0)
    assert 0 <= rep.ks_pvalue <= 1
    emp = [q["empirical"] for q in rep.qq]
    theo = [q["theoretical"] for q in rep.qq]
    assert emp == sorted(emp) and theo == sorted(theo)
    assert abs(rep.skewness) < 0.5 and abs(rep.excess_kurtosis) < 1.0
    assert rep.ad_statistic < rep.ad_critical_5pct * 3
    json.dumps(rep.to_dict())
    with pytest.raises(TooFewSamples):
        normality_report(np.zeros(99), 1.0)


def test_gap_report_logic():
    samples = [CltSample(0, t, 0.0, (g,), 1) for t, g in ((5.0, 1.0), (10.0, 1.2), (20.0, 1.1))]
    rep = logU_gap_check(samples)
    assert rep.bounded and rep.scaled_decreasing
    grow = [CltSample(0, t, 0.0, (g,), 1) for t, g in ((5.0, 1.0), (10.0, 3.0), (20.0, 9.0))]
    rep = logU_gap_check(grow)
    assert not rep.bounded and not rep.scaled_decreasing


def test_variance_ratio_and_rescaling(g32, flat):
    cfg = SchemeConfig(g32, 1e-2)
    rr = run_replicas("uniform", [1.0, 2.0], flat, cfg, 400, seed=5)
    # R == 1: log Z_t + t/2 is Brownian, so the ratio is about 1
    assert 0.8 < variance_ratio(rr, 1.0, 0.5) < 1.25
    z = rescaled(rr, 2.0, 0.5)
    assert len(z) == 400 and abs(z.mean()) < 0.2


def test_csv_round_trip(tmp_path):
    samples = [CltSample(0, 1.0, -0.123456789012345678, (0.1, 0.2), 9), CltSample(1, 1.0, 0.5, (0.3, 0.4), 9)]
    write_samples_csv(samples, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "replica,t,logZ,logU_0,logU_1,seed"
    assert read_samples_csv(tmp_path / "s.csv") == samples


def test_json_writer_handles_numpy(tmp_path):
    write_json({"a": np.float64(1.5), "b": np.arange(3)}, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": 1.5, "b": [0, 1, 2]}
