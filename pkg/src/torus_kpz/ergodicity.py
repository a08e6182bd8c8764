"""Empirical checks of geometric ergodicity of the endpoint-density process.

Synchronous coupling runs two initial conditions through the same noise.
Because the scheme's step map S is linear for fixed noise, the density
difference d = u1 - u2 obeys an exact recursion

    d' = (S d - u2' * int S d) / m1,    m1 = m2 + int S d,

so it is propagated directly with a separate log scale. Distances far below
machine epsilon relative to u stay resolvable, which is what makes a
log-linear fit over long windows meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUp, ConfigError, InsufficientSamples, Unsupported
from .grid import TorusGrid
from .noise import NoisePath, WhiteNoise1d
from .she import SchemeConfig, initial_density, linear_step, propagator, raw_step, start_state, she_step


class AllZeroDistances(InsufficientSamples):
    pass


class WrongNoiseKind(Unsupported):
    pass


class EmptyEnsemble(InsufficientSamples):
    pass


@dataclass
class CouplingRecord:
    """Distances between two coupled densities; batched over replicas when present."""

    t: np.ndarray
    log_dist_l1: np.ndarray  # shape (T,) or (T, replicas)
    log_dist_linf: np.ndarray

    @property
    def dist_l1(self) -> np.ndarray:
        return np.exp(self.log_dist_l1)

    @property
    def dist_linf(self) -> np.ndarray:
        return np.exp(self.log_dist_linf)

    def median_log(self, which: str = "linf") -> np.ndarray:
        a = self.log_dist_linf if which == "linf" else self.log_dist_l1
        return a if a.ndim == 1 else np.median(a, axis=1)

    def rows(self):
        med1, medi = self.median_log("l1"), self.median_log("linf")
        for t, a, b in zip(self.t, med1, medi):
            yield float(t), float(np.exp(a)), float(np.exp(b))


class CoupledPair:
    """Two densities under shared noise: u2 directly, u1 = u2 + exp(log_scale) * d."""

    def __init__(self, nu1, nu2, spec, cfg: SchemeConfig, path: NoisePath, start_step: int = 0):
        cfg.check(spec)
        self.spec, self.cfg, self.path, self.grid = spec, cfg, path, cfg.grid
        batch = len(path.replicas) if path.batched else None
        g = self.grid
        u2 = initial_density(nu2, g)
        u1 = initial_density(nu1, g)
        shape = np.broadcast_shapes(u1.shape, u2.shape, ((batch,) if batch else ()) + g.shape)
        self.u2 = np.broadcast_to(u2, shape).copy()
        d = np.broadcast_to(u1 - u2, shape).copy()
        amp = np.abs(d).max(axis=g.axes)
        safe = np.where(amp > 0, amp, 1.0)
        self.log_scale = np.where(amp > 0, np.log(safe), -np.inf)
        self.d = d / _ex(safe, g)
        self.step = start_step

    @property
    def time(self) -> float:
        return self.step * self.cfg.dt

    def advance(self) -> None:
        g, cfg = self.grid, self.cfg
        dW = self.path.increment(self.step)
        ut2, _, _ = raw_step(self.u2, dW, self.spec, cfg)
        m2 = g.integrate(ut2)
        self.u2 = ut2 / _ex(m2, g)
        Sd = linear_step(self.d, dW, self.spec, cfg)
        sig = g.integrate(Sd)
        with np.errstate(under="ignore"):
            m1 = m2 + sig * np.exp(self.log_scale)
        if not np.all(np.isfinite(m1)) or np.any(m1 <= 0):
            raise BlowUp("coupled mass became nonpositive")
        d = (Sd - self.u2 * _ex(sig, g)) / _ex(m1, g)
        amp = np.abs(d).max(axis=g.axes)
        safe = np.where(amp > 0, amp, 1.0)
        self.d = d / _ex(safe, g)
        self.log_scale = np.where(amp > 0, self.log_scale + np.log(safe), -np.inf)
        self.step += 1

    def u1(self) -> np.ndarray:
        with np.errstate(under="ignore"):
            return self.u2 + _ex(np.exp(self.log_scale), self.grid) * self.d

    def log_distances(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.grid
        finite = np.isfinite(self.log_scale)
        with np.errstate(divide="ignore"):
            l1 = np.log(g.integrate(np.abs(self.d))) + self.log_scale
            li = np.log(np.abs(self.d).max(axis=g.axes)) + self.log_scale
        return np.where(finite, l1, -np.inf), np.where(finite, li, -np.inf)

    def overlap_gap(self) -> np.ndarray:
        """R(u1) - R(u2) = e^s R(d, 2 u2) + e^{2s} R(d, d), free of cancellation."""
        from .noise import overlap_array

        g = self.grid
        with np.errstate(under="ignore"):
            e = np.exp(self.log_scale)
            return (e * overlap_array(self.spec, g, self.d, 2.0 * self.u2)
                    + e * e * overlap_array(self.spec, g, self.d))


def coupled_run(nu1, nu2, t_end: float, spec, cfg: SchemeConfig, path: NoisePath,
                every: float | None = None) -> CouplingRecord:
    """Evolve nu1 and nu2 under the same noise; record distances every ``every``."""
    pair = CoupledPair(nu1, nu2, spec, cfg, path)
    n_end = cfg.steps_for(t_end)
    stride = cfg.steps_for(every) if every else max(1, n_end // 200)
    ts, l1s, lis = [0.0], *[[a] for a in pair.log_distances()]
    for k in range(n_end):
        pair.advance()
        if (k + 1) % stride == 0 or k + 1 == n_end:
            ts.append(pair.time)
            a, b = pair.log_distances()
            l1s.append(a)
            lis.append(b)
    return CouplingRecord(np.array(ts), np.array(l1s), np.array(lis))


def _ex(a, grid: TorusGrid):
    return np.asarray(a)[(...,) + (None,) * grid.dim]


@dataclass
class DecayFit:
    rate: float
    prefactor: float
    r_squared: float
    n_points: int


def fit_decay_rate(t, dist=None, window: tuple[float, float] | None = None,
                   log_dist=None) -> DecayFit:
    """Least-squares fit of log dist = log C - rate * t over ``window``.

    Pass either ``dist`` or ``log_dist`` (a CouplingRecord works as ``t``:
    its replica-median L-infinity series is fitted).
    """
    if isinstance(t, CouplingRecord):
        rec = t
        t, log_dist = rec.t, rec.median_log("linf")
    t = np.asarray(t, dtype=float)
    if log_dist is None:
        dist = np.asarray(dist, dtype=float)
        with np.errstate(divide="ignore"):
            log_dist = np.log(dist)
    log_dist = np.asarray(log_dist, dtype=float)
    mask = np.ones_like(t, dtype=bool)
    if window is not None:
        mask &= (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if np.all(~np.isfinite(log_dist[mask])):
        return DecayFit(math.inf, 0.0, 1.0, 0)
    mask &= np.isfinite(log_dist)
    if mask.sum() < 10:
        raise InsufficientSamples(f"need >= 10 positive distances in the window, got {int(mask.sum())}")
    x, y = t[mask], log_dist[mask]
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return DecayFit(-float(slope), float(np.exp(intercept)), r2, int(mask.sum()))


# --- the B_t(delta) ratio ----------------------------------------------------


def b_ratio_from_propagators(later, earlier) -> float:
    """inf_{x,y,z} Z2(x,y) Z1(y,z) / sup_{x,z} int Z2(x,y') Z1(y',z) dy'."""
    A, B = later.values, earlier.values
    # every entry is positive, so the triple infimum separates over y
    num = np.min(A.min(axis=0) * B.min(axis=1))
    den = (A @ B).max() * later.grid.cell_volume
    # log scales cancel between numerator and denominator
    return float(num / den)


def b_ratio_statistic(spec, cfg: SchemeConfig, path: NoisePath, t: float) -> float:
    if t < 1:
        raise ConfigError("the ratio needs t >= 1")
    earlier = propagator(t - 1.0, t, spec, cfg, path)
    later = propagator(t, t + 1.0, spec, cfg, path)
    return b_ratio_from_propagators(later, earlier)


def propagator_extremes(spec, cfg: SchemeConfig, path: NoisePath, t: float) -> tuple[float, float]:
    """(inf, sup) of Z_{t,t-1} over the grid."""
    P = propagator(t - 1.0, t, spec, cfg, path)
    return float(P.values.min() * math.exp(P.log_scale)), float(P.values.max() * math.exp(P.log_scale))


# --- invariant measure ------------------------------------------------------


@dataclass
class InvariantEnsemble:
    grid: TorusGrid
    spec: object
    samples: np.ndarray  # (n_samples, *grid.shape)
    burn_in: float
    thinning: float
    seed: int
    replicas: tuple
    init: object = "uniform"
    sample_times: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def sample_invariant(spec, cfg: SchemeConfig, burn_in: float, n_samples: int, thinning: float,
                     seed: int, init="uniform", n_replicas: int | None = None,
                     replica_offset: int = 0) -> InvariantEnsemble:
    """Densities after ``burn_in``, thinned every ``thinning`` time units.

    Replicas run in one batch; each contributes ``ceil(n_samples / n_replicas)``
    consecutive thinned samples. Samples are ordered by (time, replica).
    """
    if burn_in < 0 or thinning <= 0:
        raise ConfigError("burn_in must be >= 0 and thinning > 0")
    n_rep = n_replicas or min(n_samples, 64)
    per = -(-n_samples // n_rep)
    path = NoisePath(spec, cfg.grid, cfg.dt, seed, list(range(replica_offset, replica_offset + n_rep)))
    st = start_state(init, cfg, batch=n_rep)
    for _ in range(cfg.steps_for(burn_in)):
        st = she_step(st, spec, cfg, path)
    gap = cfg.steps_for(thinning)
    out, times = [], []
    for j in range(per):
        if j:
            for _ in range(gap):
                st = she_step(st, spec, cfg, path)
        out.append(st.u.copy())
        times.append(st.time)
    samples = np.concatenate(out, axis=0)[:n_samples]
    return InvariantEnsemble(cfg.grid, spec, samples, burn_in, thinning, seed, tuple(path.replicas), init, times)


@dataclass
class BridgeReport:
    x: np.ndarray
    emp_var: np.ndarray
    target_var: np.ndarray
    max_var_dev: float
    max_cov_dev: float
    n_samples: int

    def rows(self):
        for a, b, c in zip(self.x, self.emp_var, self.target_var):
            yield float(a), float(b), float(c)


def bridge_compare(ens: InvariantEnsemble) -> BridgeReport:
    """Compare log u(x) - log u(0) with a Brownian bridge pinned at 0 and 1."""
    if not isinstance(ens.spec, WhiteNoise1d):
        raise WrongNoiseKind("the bridge comparison applies to d=1 white noise only")
    x = ens.grid.coords()
    L = np.log(ens.samples) - np.log(ens.samples[:, :1])
    L = L - L.mean(axis=0)
    cov = L.T @ L / (len(L) - 1)
    target_cov = np.minimum.outer(x, x) - np.outer(x, x)
    emp_var = np.diag(cov).copy()
    target_var = x * (1 - x)
    return BridgeReport(
        x=x,
        emp_var=emp_var,
        target_var=target_var,
        max_var_dev=float(np.abs(emp_var - target_var).max()),
        max_cov_dev=float(np.abs(cov - target_cov).max()),
        n_samples=len(L),
    )


# --- Fortet-Mourier proxy ----------------------------------------------------


@dataclass
class LipschitzDictionary:
    """Functionals F_j(u) = tanh(int phi_j u) with ||phi_j||_inf <= 1/2.

    |F_j| <= 1, and |F_j(u) - F_j(v)| <= ||phi_j||_inf ||u - v||_L1 <= d_TV(u, v)
    with d_TV = ||u - v||_L1 / 2.
    """

    grid: TorusGrid
    phis: np.ndarray  # (J, *grid.shape)
    names: list = field(default_factory=list)

    def __post_init__(self):
        if np.abs(self.phis).max() > 0.5 + 1e-15:
            raise ConfigError("test functions must satisfy ||phi||_inf <= 1/2")

    def evaluate(self, samples: np.ndarray) -> np.ndarray:
        """F_j on each sample; shape (n_samples, J)."""
        flat = np.asarray(samples).reshape(-1, self.grid.size)
        return np.tanh(self.grid.cell_volume * flat @ self.phis.reshape(len(self.phis), -1).T)

    @classmethod
    def default(cls, grid: TorusGrid) -> LipschitzDictionary:
        x = grid.coords() if grid.dim == 1 else grid.coords()[..., 0]
        phis, names = [], []
        for k in range(1, 5):
            phis += [0.5 * np.cos(2 * np.pi * k * x), 0.5 * np.sin(2 * np.pi * k * x)]
            names += [f"cos{k}", f"sin{k}"]
        for c in np.arange(8) / 8:
            phis.append(0.5 * ((1 + np.cos(2 * np.pi * (x - c))) / 2) ** 2)
            names.append(f"bump{c:.3f}")
        return cls(grid, np.array(phis), names)

    @classmethod
    def single(cls, grid: TorusGrid, phi: np.ndarray, name: str = "phi") -> LipschitzDictionary:
        return cls(grid, np.asarray(phi, dtype=float)[None], [name])


def _samples_of(ens) -> np.ndarray:
    s = ens.samples if isinstance(ens, InvariantEnsemble) else np.asarray(ens)
    if len(s) == 0:
        raise EmptyEnsemble("ensemble has no samples")
    return s


def fm_proxy_distance(ens_a, ens_b, dictionary: LipschitzDictionary) -> float:
    """max_j |mean_A F_j - mean_B F_j|, a lower bound on the Fortet-Mourier distance."""
    fa = dictionary.evaluate(_samples_of(ens_a)).mean(axis=0)
    fb = dictionary.evaluate(_samples_of(ens_b)).mean(axis=0)
    return float(np.abs(fa - fb).max())


def fm_proxy_bootstrap(ens_a, ens_b, dictionary: LipschitzDictionary, n_boot: int = 200,
                       seed: int = 0) -> tuple[float, float]:
    """(distance, bootstrap standard error) of the proxy."""
    fa = dictionary.evaluate(_samples_of(ens_a))
    fb = dictionary.evaluate(_samples_of(ens_b))
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        ia = rng.integers(0, len(fa), len(fa))
        ib = rng.integers(0, len(fb), len(fb))
        boots.append(np.abs(fa[ia].mean(0) - fb[ib].mean(0)).max())
    return float(np.abs(fa.mean(0) - fb.mean(0)).max()), float(np.std(boots, ddof=1))
