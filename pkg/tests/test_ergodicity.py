import numpy as np
import pytest

from torus_kpz.errors import ConfigError, InsufficientSamples
from torus_kpz.ergodicity import (
    CoupledPair,
    LipschitzDictionary,
    WrongNoiseKind,
    EmptyEnsemble,
    b_ratio_statistic,
    bridge_compare,
    coupled_run,
    fit_decay_rate,
    fm_proxy_bootstrap,
    fm_proxy_distance,
    propagator_extremes,
    sample_invariant,
)
from torus_kpz.grid import TorusGrid
from torus_kpz.heat import eval_p
from torus_kpz.noise import NoisePath, ZeroNoise, overlap_array
from torus_kpz.she import SchemeConfig, run

from conftest import random_density


def test_fit_recovers_synthetic_rate():
    t = np.linspace(0, 5, 51)
    fit = fit_decay_rate(t, 3.0 * np.exp(-1.7 * t))
    assert fit.rate == pytest.approx(1.7, rel=1e-12)
    assert fit.prefactor == pytest.approx(3.0, rel=1e-12)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_window_and_sentinels():
    t = np.linspace(0, 5, 51)
    d = np.where(t < 2, 1.0, np.exp(-t))
    assert fit_decay_rate(t, d, window=(2, 5)).rate == pytest.approx(1.0)
    assert fit_decay_rate(t, np.zeros_like(t)).rate == np.inf
    with pytest.raises(InsufficientSamples):
        fit_decay_rate(t[:5], np.exp(-t[:5]))


def test_zero_noise_coupling_rate(g32):
    # first Fourier mode of the difference decays like exp(-2 pi^2 t)
    cfg = SchemeConfig(g32, 1e-3)
    s = ZeroNoise()
    rec = coupled_run(("dirac", 0.5), "uniform", 1.5, s, cfg, NoisePath(s, g32, cfg.dt, 0), every=0.05)
    fit = fit_decay_rate(rec, window=(0.5, 1.5))
    assert fit.rate == pytest.approx(2 * np.pi**2, rel=1e-3)


def test_coupled_pair_matches_separate_runs(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(smooth, g32, cfg.dt, seed=4)
    v = random_density(g32, np.random.default_rng(1))
    pair = CoupledPair(v, "uniform", smooth, cfg, path)
    for _ in range(200):
        pair.advance()
    a = run(v, 0.2, smooth, cfg, path)[-1].u
    b = run("uniform", 0.2, smooth, cfg, path)[-1].u
    assert np.allclose(pair.u1(), a, atol=1e-12)
    assert np.allclose(pair.u2, b, atol=1e-12)
    gap = overlap_array(smooth, g32, a) - overlap_array(smooth, g32, b)
    assert pair.overlap_gap() == pytest.approx(gap, abs=1e-12)
    l1, linf = pair.log_distances()
    assert np.exp(linf) == pytest.approx(np.abs(a - b).max(), rel=1e-8)
    assert np.exp(l1) == pytest.approx(g32.integrate(np.abs(a - b)), rel=1e-8)


def test_identical_initial_data_has_zero_distance(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    rec = coupled_run("uniform", "uniform", 0.05, smooth, cfg, NoisePath(smooth, g32, cfg.dt, 0), every=0.01)
    assert np.all(np.isneginf(rec.log_dist_linf))
    assert fit_decay_rate(rec).rate == np.inf


def test_b_ratio_zero_noise_closed_form():
    g = TorusGrid(1, 64)
    cfg = SchemeConfig(g, 1e-3)
    s = ZeroNoise()
    b = b_ratio_statistic(s, cfg, NoisePath(s, g, cfg.dt, 0), 1.0)
    # inf over x,y,z of p_1(x-y) p_1(y-z) / sup p_2, on the grid
    pmin = eval_p(1.0, 0.5)
    assert b == pytest.approx(pmin * pmin / eval_p(2.0, 0.0), rel=1e-9)
    assert 0 < b <= 1
    with pytest.raises(ConfigError):
        b_ratio_statistic(s, cfg, NoisePath(s, g, cfg.dt, 0), 0.5)


def test_b_ratio_in_unit_interval(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    for seed in range(2):
        b = b_ratio_statistic(smooth, cfg, NoisePath(smooth, g32, cfg.dt, seed), 1.0)
        assert 0 < b <= 1


def test_propagator_extremes_ordered(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    lo, hi = propagator_extremes(smooth, cfg, NoisePath(smooth, g32, cfg.dt, 1), 1.0)
    assert 0 < lo < hi


def test_invariant_constant_noise_is_uniform(g32, flat):
    cfg = SchemeConfig(g32, 1e-2)
    ens = sample_invariant(flat, cfg, burn_in=0.5, n_samples=6, thinning=0.1, seed=1, n_replicas=3)
    assert len(ens) == 6
    assert np.allclose(ens.samples, 1.0, atol=1e-13)


def test_invariant_samples_are_densities(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    ens = sample_invariant(smooth, cfg, burn_in=0.2, n_samples=10, thinning=0.1, seed=2, n_replicas=5)
    assert np.allclose(g32.integrate(ens.samples), 1.0, atol=1e-13)
    assert np.all(overlap_array(smooth, g32, ens.samples) >= 1 - 1e-9)
    with pytest.raises(ConfigError):
        sample_invariant(smooth, cfg, burn_in=-1, n_samples=4, thinning=0.1, seed=2)


def test_bridge_needs_white_noise(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    ens = sample_invariant(smooth, cfg, burn_in=0.0, n_samples=4, thinning=0.1, seed=2)
    with pytest.raises(WrongNoiseKind):
        bridge_compare(ens)


def test_lipschitz_dictionary(g32):
    d = LipschitzDictionary.default(g32)
    assert len(d.phis) == 16
    with pytest.raises(ConfigError):
        LipschitzDictionary.single(g32, np.ones(32))
    rng = np.random.default_rng(3)
    a = np.stack([random_density(g32, rng) for _ in range(20)])
    b = np.stack([random_density(g32, rng) for _ in range(20)])
    assert fm_proxy_distance(a, a, d) == 0.0
    # each F_j is 1/2-Lipschitz in L1, so the proxy is at most the mean TV gap
    dist = fm_proxy_distance(a, b, d)
    assert dist <= 0.5 * np.mean([g32.integrate(np.abs(x - y)) for x in a for y in b]) + 1e-12
    val, err = fm_proxy_bootstrap(a, b, d, n_boot=50)
    assert val == dist and err >= 0
    with pytest.raises(EmptyEnsemble):
        fm_proxy_distance(np.empty((0, 32)), a, d)
