import csv
import math

import numpy as np
import pytest

from torus_kpz.errors import ConfigError
from torus_kpz.grid import TorusGrid
from torus_kpz.heat import eval_p
from torus_kpz.noise import NoisePath, WhiteNoise1d, ZeroNoise
from torus_kpz.she import (
    Scheme,
    SchemeConfig,
    discrete_laplacian,
    initial_density,
    propagator,
    run,
    she_step,
    start_state,
    write_trajectory_csv,
)

from conftest import random_density


def test_zero_noise_matches_heat_kernel():
    g = TorusGrid(1, 128)
    cfg = SchemeConfig(g, 1e-3)
    path = NoisePath(ZeroNoise(), g, cfg.dt, seed=0)
    snaps = run(("dirac", 0.5), 0.1, ZeroNoise(), cfg, path)
    u = snaps[-1].u
    p = eval_p(0.1, g.coords() - 0.5)
    assert np.max(np.abs(u - p)) < 1e-12
    assert abs(snaps[-1].log_Z) < 1e-15


def test_constant_noise_closed_form(g32, flat):
    # R == 1: the noise is spatially constant, so U = exp(w - t/2) * heat flow
    cfg = SchemeConfig(g32, 1e-2)
    path = NoisePath(flat, g32, cfg.dt, seed=3)
    v = random_density(g32, np.random.default_rng(0))
    snaps = run(v, 1.0, flat, cfg, path)
    w = sum(path.normals(k)[0] for k in range(100)) * math.sqrt(cfg.dt)
    assert snaps[-1].log_Z == pytest.approx(w - 0.5, abs=1e-12)
    from torus_kpz.heat import semigroup_array

    assert np.max(np.abs(snaps[-1].u - semigroup_array(v, g32, 1.0))) < 1e-13


def test_constant_noise_ledger_identity(g32, flat):
    # exp-Euler increments are exactly dW - dt/2, so log Z = M - QV/2 to round-off
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(flat, g32, cfg.dt, seed=4, replica=[0, 1, 2])
    s = run("uniform", 0.5, flat, cfg, path)[-1]
    assert np.allclose(s.log_Z, s.M - 0.5 * s.QV, atol=1e-12)
    assert np.allclose(s.QV, 0.5, atol=1e-12)


def test_density_stays_normalized_and_positive(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(smooth, g32, cfg.dt, seed=1, replica=[0, 1])
    st = start_state(("dirac", 0.2), cfg, batch=2)
    for _ in range(300):
        st = she_step(st, smooth, cfg, path)
        assert np.allclose(g32.integrate(st.u), 1.0, atol=1e-13)
        assert st.u.min() > 0
    assert st.breach_steps == 0
    assert st.time == pytest.approx(0.3)


def test_batched_run_equals_single_runs(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    batch = run("uniform", 0.3, smooth, cfg, NoisePath(smooth, g32, cfg.dt, seed=7, replica=[0, 1, 2]))[-1]
    for j in range(3):
        one = run("uniform", 0.3, smooth, cfg, NoisePath(smooth, g32, cfg.dt, seed=7, replica=j))[-1]
        assert one.log_Z == pytest.approx(batch.log_Z[j], abs=1e-13)


def test_run_is_reproducible(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    a = run("uniform", 0.2, smooth, cfg, NoisePath(smooth, g32, cfg.dt, seed=8))
    b = run("uniform", 0.2, smooth, cfg, NoisePath(smooth, g32, cfg.dt, seed=8))
    assert [s.row() for s in a] == [s.row() for s in b]


def test_snapshot_times(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    snaps = run("uniform", 0.5, smooth, cfg, NoisePath(smooth, g32, cfg.dt, 1), times=[0, 0.1, 0.5])
    assert [s.t for s in snaps] == pytest.approx([0, 0.1, 0.5])
    assert snaps[0].log_Z == 0
    with pytest.raises(ConfigError):
        run("uniform", 0.5, smooth, cfg, NoisePath(smooth, g32, cfg.dt, 1), times=[0.6])
    with pytest.raises(ConfigError):
        run("uniform", 0.5, smooth, cfg, NoisePath(smooth, g32, cfg.dt, 1), times=[0.10005])


def test_overlap_column_at_least_one(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(smooth, g32, cfg.dt, seed=2, replica=list(range(10)))
    snaps = run(("dirac", 0.0), 1.0, smooth, cfg, path, times=np.arange(0.1, 1.01, 0.1).round(10))
    for s in snaps:
        assert np.all(s.overlap_uu >= 1 - 1e-9)


def test_trajectory_csv(tmp_path, g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    snaps = run("uniform", 0.1, smooth, cfg, NoisePath(smooth, g32, cfg.dt, 5), times=[0, 0.05, 0.1])
    write_trajectory_csv(snaps, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "logZ", "M", "QV", "min_u", "max_u", "overlap_uu"]
    assert float(rows[-1][1]) == float(snaps[-1].log_Z)


def test_fd_scheme_stability_constraint():
    g = TorusGrid(1, 64)
    bad = SchemeConfig(g, 1e-3, Scheme.FD_EULER_WHITE)
    with pytest.raises(ConfigError, match="h\\^2/4"):
        bad.check(WhiteNoise1d())
    SchemeConfig(g, g.spacing**2 / 4, "fd_euler_white").check(WhiteNoise1d())


def test_scheme_spec_pairing(g32, smooth):
    with pytest.raises(ConfigError):
        SchemeConfig(g32, 1e-3).check(WhiteNoise1d())
    with pytest.raises(ConfigError):
        SchemeConfig(g32, 1e-4, "fd_euler_white").check(smooth)
    with pytest.raises(ConfigError):
        SchemeConfig(g32, 0.0)


def test_discrete_laplacian_on_cosine():
    g = TorusGrid(1, 64)
    x = g.coords()
    f = np.cos(2 * np.pi * x)
    want = -(4 / g.spacing**2) * np.sin(np.pi * g.spacing) ** 2 * f
    assert np.allclose(discrete_laplacian(f, g), want, atol=1e-9)


def test_white_noise_run_stays_positive():
    g = TorusGrid(1, 32)
    cfg = SchemeConfig(g, g.spacing**2 / 4, "fd_euler_white")
    s = WhiteNoise1d()
    snaps = run("uniform", 0.25, s, cfg, NoisePath(s, g, cfg.dt, 1, replica=[0, 1, 2]), keep_u=True)
    assert np.all(snaps[-1].min_u > 0)
    assert np.allclose(g.integrate(snaps[-1].u), 1.0, atol=1e-12)


def test_initial_density_forms(g32):
    assert np.allclose(initial_density("uniform", g32), 1.0)
    assert g32.integrate(initial_density(("dirac", 0.25), g32)) == pytest.approx(1.0)
    assert g32.integrate(initial_density(np.arange(1.0, 33.0), g32)) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        initial_density("bogus", g32)


def test_propagator_zero_noise_is_heat_kernel(g64):
    # n = 64 keeps the per-step aliasing weight exp(-2 pi^2 n^2 dt) below 1e-30
    cfg = SchemeConfig(g64, 1e-3)
    s = ZeroNoise()
    P = propagator(0.0, 0.05, s, cfg, NoisePath(s, g64, cfg.dt, 0)).matrix()
    x = g64.coords()
    p = eval_p(0.05, x[:, None] - x[None, :], dim=1)
    p = p / (g64.cell_volume * p.sum(axis=0, keepdims=True))
    assert np.max(np.abs(P - p)) < 1e-11


def test_propagator_composes(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(smooth, g32, cfg.dt, seed=12)
    a = propagator(0.0, 0.1, smooth, cfg, path)
    b = propagator(0.1, 0.25, smooth, cfg, path)
    full = propagator(0.0, 0.25, smooth, cfg, path)
    comp = b.compose(a)
    assert np.allclose(comp.matrix(), full.matrix(), rtol=1e-10)
    with pytest.raises(ConfigError):
        a.compose(b)


def test_propagator_reproduces_solution(g32, smooth):
    cfg = SchemeConfig(g32, 1e-3)
    path = NoisePath(smooth, g32, cfg.dt, seed=13)
    v = random_density(g32, np.random.default_rng(5))
    P = propagator(0.0, 0.2, smooth, cfg, path)
    U = g32.cell_volume * P.matrix() @ v
    snap = run(v, 0.2, smooth, cfg, path)[-1]
    assert math.log(g32.integrate(U)) == pytest.approx(snap.log_Z, abs=1e-12)
    assert np.allclose(U / g32.integrate(U), snap.u, atol=1e-12)
