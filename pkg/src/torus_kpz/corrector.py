"""Monte Carlo estimators for the constants of the free-energy CLT.

gamma      half the stationary mean of R(u)
P_t R~     E R(u(t; v)) - 2 gamma, the centered overlap pushed forward in time
chi(T, v)  time integral of P_t R~ over [0, T]
D chi      the L2 gradient of chi in the initial density
sigma^2    stationary mean of R(u (1 - D chi(u) / 2)), or the replica
           variance of (log Z_t + gamma t) / sqrt(t)

The gradient uses the full propagator from every grid point, normalized by
the partition function started from v:

    U(t, x; z, v) = Z_{t,0}(x, z) / int U(t, x'; v) dx'
    D P_t R(v)(z) = 2 [ R(U(t; z, v), u(t; v)) - ||U(t; z, v)||_L1 R(u(t; v)) ]

Since int v(z) U(t, x; z, v) dz = u(t, x; v), the pairing <v, D P_t R(v)>
vanishes on every noise path, not just on average.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CostGuard, InsufficientSamples, Unsupported
from .ergodicity import CoupledPair, InvariantEnsemble, fit_decay_rate
from .grid import TorusGrid
from .noise import NoisePath, SmoothFourier, mode_basis, overlap_array
from .she import SchemeConfig, initial_density, raw_step, she_step, start_state

MAX_GRADIENT_POINTS = 128
# pairing is exact per path, so its MC error bar can sit at round-off level
ORTHOGONALITY_FLOOR = 1e-12


@dataclass
class Estimate:
    value: float
    stderr: float
    n: int

    def __iter__(self):
        yield self.value
        yield self.stderr


@dataclass
class GammaEstimate:
    value: float
    stderr: float
    burn_in: float
    n_samples: int


@dataclass
class CorrectorEstimate:
    value: float
    stderr: float
    tail_bound: float
    gamma_bias_per_T: float
    T: float
    n_mc: int
    times: np.ndarray = field(repr=False, default=None)
    ptr_tilde: np.ndarray = field(repr=False, default=None)


@dataclass
class GradientEstimate:
    grid: TorusGrid
    values: np.ndarray
    stderr: np.ndarray
    orthogonality: float
    orthogonality_stderr: float
    chi: float
    chi_stderr: float
    T: float
    n_mc: int
    per_path: np.ndarray = field(repr=False, default=None)
    chi_per_path: np.ndarray = field(repr=False, default=None)


@dataclass
class SigmaEstimate:
    sigma2_qv: float
    stderr_qv: float
    sigma2_var: float
    stderr_var: float
    t_var: float = math.nan
    n_states: int = 0
    n_replicas: int = 0


def _mean_err(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        raise InsufficientSamples("need at least two samples for an error bar")
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / math.sqrt(n)


# --- gamma ----------------------------------------------------------------


def batch_means(series: np.ndarray, n_batches: int) -> tuple[float, float]:
    """Mean and batch-means standard error of (time, replica) series."""
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    T = series.shape[0] - series.shape[0] % n_batches
    if T < n_batches or n_batches < 1:
        raise InsufficientSamples("not enough time points for batch means")
    b = series[:T].reshape(n_batches, T // n_batches, -1).mean(axis=1).reshape(-1)
    return float(b.mean()), float(b.std(ddof=1) / math.sqrt(len(b))) if len(b) > 1 else math.nan


def estimate_gamma(spec, cfg: SchemeConfig, seed: int, burn_in: float, t_avg: float,
                   n_replicas: int = 8, n_batches: int = 10, init="uniform",
                   replica_offset: int = 0) -> GammaEstimate:
    """Time average of R(u)/2 after ``burn_in`` across replicas; batch-means error."""
    if t_avg <= 0:
        raise InsufficientSamples("averaging window must be positive")
    path = NoisePath(spec, cfg.grid, cfg.dt, seed, list(range(replica_offset, replica_offset + n_replicas)))
    st = start_state(init, cfg, batch=n_replicas)
    for _ in range(cfg.steps_for(burn_in)):
        st = she_step(st, spec, cfg, path)
    vals = []
    for _ in range(cfg.steps_for(t_avg)):
        vals.append(overlap_array(spec, cfg.grid, st.u))
        st = she_step(st, spec, cfg, path)
    series = 0.5 * np.array(vals)
    m, e = batch_means(series, n_batches)
    return GammaEstimate(m, e, burn_in, series.size)


def gamma_from_ensemble(ens: InvariantEnsemble) -> GammaEstimate:
    r = 0.5 * overlap_array(ens.spec, ens.grid, ens.samples)
    m, e = _mean_err(r)
    return GammaEstimate(float(m), float(e), ens.burn_in, len(r))


# --- P_t R~ ------------------------------------------------------------------


def _partners(ensemble: InvariantEnsemble, n_mc: int) -> np.ndarray:
    if len(ensemble) < n_mc:
        raise InsufficientSamples(f"ensemble has {len(ensemble)} samples, need {n_mc}")
    return ensemble.samples[:n_mc]


def ptr_tilde_curve(v, times, spec, cfg: SchemeConfig, seed: int, n_mc: int, gamma: float | None = None,
                    ensemble: InvariantEnsemble | None = None, replica_offset: int = 0):
    """P_t R~(v) at each of ``times`` (ascending) with error bars.

    Without ``ensemble``: plain average of R(u(t; v)) - 2 gamma.

    With ``ensemble``: every path also carries a stationary partner w_j
    under the same noise, and the estimator is
    mean_j [R(u(t; v)) - R(u(t; w_j))] + (mean_j R(w_j) - 2 gamma).
    The coupled gap decays pathwise, so the statistical error shrinks with t.
    ``gamma`` defaults to the ensemble's own value, which zeroes the offset.
    Returns (values, stderrs, per-path array of shape (len(times), n_mc)).
    """
    times = np.asarray(times, dtype=float)
    marks = [cfg.steps_for(t) for t in times]
    path = NoisePath(spec, cfg.grid, cfg.dt, seed, list(range(replica_offset, replica_offset + n_mc)))
    if ensemble is None:
        if gamma is None:
            raise InsufficientSamples("plain estimator needs gamma")
        st = start_state(v, cfg, batch=n_mc)
        sample = lambda: overlap_array(spec, cfg.grid, st.u) - 2.0 * gamma
    else:
        w = _partners(ensemble, n_mc)
        Rw = overlap_array(spec, cfg.grid, w)
        g_ens = 0.5 * float(Rw.mean())
        offset = 2.0 * g_ens - 2.0 * (g_ens if gamma is None else gamma)
        pair = CoupledPair(v, w, spec, cfg, path)
        sample = lambda: pair.overlap_gap() + offset
    out = np.empty((len(times), n_mc))
    k = 0
    for i, mark in enumerate(marks):
        while k < mark:
            if ensemble is None:
                st = she_step(st, spec, cfg, path)
            else:
                pair.advance()
            k += 1
        out[i] = sample()
    m, e = _mean_err(out, axis=1)
    return m, e, out


def estimate_PtR_tilde(v, t: float, spec, cfg: SchemeConfig, seed: int, n_mc: int,
                       gamma: float | None = None, ensemble: InvariantEnsemble | None = None) -> Estimate:
    m, e, _ = ptr_tilde_curve(v, [t], spec, cfg, seed, n_mc, gamma, ensemble)
    return Estimate(float(m[0]), float(e[0]), n_mc)


def tail_fit(times, values, window=(1.0, math.inf)):
    """Log-linear fit of |P_t R~| on ``window``; returns DecayFit."""
    return fit_decay_rate(times, np.abs(values), window=window)


# --- chi ---------------------------------------------------------------------


def quadrature_times(T: float, cfg: SchemeConfig, dt_q: float | None = None) -> np.ndarray:
    dq = cfg.dt if dt_q is None else dt_q
    n = cfg.steps_for(T)
    stride = cfg.steps_for(dq)
    ks = list(range(0, n + 1, stride))
    if ks[-1] != n:
        ks.append(n)
    return np.array(ks) * cfg.dt


def estimate_chi(v, T: float, spec, cfg: SchemeConfig, seed: int, n_mc: int,
                 gamma: float | None = None, ensemble: InvariantEnsemble | None = None,
                 gamma_stderr: float = 0.0, dt_q: float | None = None) -> CorrectorEstimate:
    """Trapezoidal integral of P_t R~(v) over [0, T], per path, then averaged.

    The tail beyond T is bounded by C/lambda e^{-lambda T} from a fit of the
    curve on [1, T] (NaN when T < 1 leaves too few points). The gamma error
    enters as a bias of 2 * gamma_stderr per unit T, reported separately.
    """
    if T < 1:
        raise InsufficientSamples(f"corrector horizon T={T} below 1")
    ts = quadrature_times(T, cfg, dt_q)
    m, e, per = ptr_tilde_curve(v, ts, spec, cfg, seed, n_mc, gamma, ensemble)
    chi_paths = np.trapezoid(per, ts, axis=0)
    val, err = _mean_err(chi_paths)
    tail = math.nan
    try:
        fit = tail_fit(ts, m, window=(min(1.0, T / 2), T))
        if fit.rate > 0 and math.isfinite(fit.rate):
            tail = fit.prefactor / fit.rate * math.exp(-fit.rate * T)
    except InsufficientSamples:
        pass
    return CorrectorEstimate(float(val), float(err), tail, 2.0 * gamma_stderr, T, n_mc, ts, m)


# --- D chi ---------------------------------------------------------------------


def _gradient_paths(v, T: float, spec, cfg: SchemeConfig, seed: int, n_mc: int, gamma: float,
                    replica_offset: int = 0, directions: np.ndarray | None = None):
    """Per-path gradient of chi(T, .) at v, plus per-path chi.

    Evolves, for each path, the full column set U(t; z, v) (one column per
    grid point z) together with u(t; v) = int v(z) U(t; z, v) dz.
    ``directions`` (J, *shape) optionally evolves extra initial data
    v +/- eps h alongside, sharing the noise; their per-path chi values are
    returned too.
    """
    grid = cfg.grid
    if grid.size > MAX_GRADIENT_POINTS:
        raise CostGuard(f"gradient needs the full propagator; grid has {grid.size} > {MAX_GRADIENT_POINTS} points")
    if not isinstance(spec, SmoothFourier):
        # the white-noise overlap is not band-limited; only the smooth route is supported
        raise Unsupported("corrector gradient is implemented for smooth covariances")
    basis = mode_basis(spec, grid)
    v0 = initial_density(v, grid)
    hv = grid.cell_volume
    path = NoisePath(spec, grid, cfg.dt, seed, list(range(replica_offset, replica_offset + n_mc)))
    cols = np.broadcast_to(np.eye(grid.size).reshape(grid.size, *grid.shape) / hv,
                           (n_mc, grid.size) + grid.shape).copy()
    vflat = v0.reshape(-1)
    extra = None
    if directions is not None:
        extra = np.broadcast_to(np.asarray(directions, dtype=float), (n_mc,) + np.shape(directions)).copy()
        extra = extra / grid.integrate(extra)[(...,) + (None,) * grid.dim]
    n = cfg.steps_for(T)
    ts = np.arange(n + 1) * cfg.dt
    grad = np.zeros((n + 1, n_mc, grid.size))
    R_u = np.zeros((n + 1, n_mc))
    R_extra = None if extra is None else np.zeros((n + 1, n_mc, extra.shape[1]))

    def record(i):
        u = hv * np.tensordot(cols, vflat, axes=([1], [0]))  # (n_mc, *shape)
        cu = basis.project(u)  # (n_mc, m)
        cU = basis.project(cols)  # (n_mc, n_z, m)
        RUu = (cU * cu[:, None, :]) @ basis.weights
        Ru = (cu * cu) @ basis.weights
        mass_cols = grid.integrate(cols)
        grad[i] = 2.0 * (RUu - mass_cols * Ru[:, None])
        R_u[i] = Ru
        if extra is not None:
            R_extra[i] = overlap_array(spec, grid, extra)

    record(0)
    for k in range(n):
        dW = path.increment(k)  # (n_mc, *shape)
        cols, _, _ = raw_step(cols, dW[:, None], spec, cfg)
        # normalize by the mass of the v-started solution: columns become U(t; z, v)
        m_v = hv * grid.integrate(cols) @ vflat
        cols = cols / m_v[(slice(None), None) + (None,) * grid.dim]
        if extra is not None:
            extra, _, _ = raw_step(extra, dW[:, None], spec, cfg)
            extra = extra / grid.integrate(extra)[(...,) + (None,) * grid.dim]
        record(k + 1)
    grad_paths = np.trapezoid(grad, ts, axis=0)  # (n_mc, n_z)
    chi_paths = np.trapezoid(R_u - 2.0 * gamma, ts, axis=0)
    chi_extra = None if extra is None else np.trapezoid(R_extra - 2.0 * gamma, ts, axis=0)
    return grad_paths, chi_paths, chi_extra


def estimate_Dchi(v, T: float, spec, cfg: SchemeConfig, seed: int, n_mc: int,
                  gamma: float = 0.5, replica_offset: int = 0) -> GradientEstimate:
    grid = cfg.grid
    grad_paths, chi_paths, _ = _gradient_paths(v, T, spec, cfg, seed, n_mc, gamma, replica_offset)
    vflat = initial_density(v, grid).reshape(-1)
    mean, err = _mean_err(grad_paths)
    pair = grid.cell_volume * grad_paths @ vflat
    om, oe = _mean_err(pair)
    cm, ce = _mean_err(chi_paths)
    return GradientEstimate(grid, mean.reshape(grid.shape), err.reshape(grid.shape), float(om), float(oe),
                            float(cm), float(ce), T, n_mc, grad_paths, chi_paths)


@dataclass
class FdCheck:
    pairing: float
    pairing_stderr: float
    fd: float
    fd_stderr: float
    diff: float
    diff_stderr: float
    eps: float

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.pairing_stderr, self.fd_stderr)


def finite_difference_check(v, h, eps: float, T: float, spec, cfg: SchemeConfig, seed: int, n_mc: int,
                            gamma: float = 0.5) -> FdCheck:
    """Compare <D chi(v), h> with (chi(v + eps h) - chi(v - eps h)) / 2 eps.

    ``h`` must have zero mean; all three initial data share every noise path.
    """
    grid = cfg.grid
    v0 = initial_density(v, grid)
    h = np.asarray(h, dtype=float)
    if abs(grid.integrate(h)) > 1e-12:
        raise ValueError("perturbation must integrate to zero")
    dirs = np.stack([v0 + eps * h, v0 - eps * h])
    if np.any(dirs < 0):
        raise ValueError("v +/- eps h must stay nonnegative")
    grad_paths, _, chi_pm = _gradient_paths(v0, T, spec, cfg, seed, n_mc, gamma, directions=dirs)
    pairing = grid.cell_volume * grad_paths @ h.reshape(-1)
    fd = (chi_pm[:, 0] - chi_pm[:, 1]) / (2 * eps)
    pm, pe = _mean_err(pairing)
    fm, fe = _mean_err(fd)
    dm, de = _mean_err(pairing - fd)
    return FdCheck(float(pm), float(pe), float(fm), float(fe), float(dm), float(de), eps)


# --- sigma^2 -------------------------------------------------------------------


def sigma2_qv(states: np.ndarray, T: float, spec, cfg: SchemeConfig, seed: int, n_mc: int,
              gamma: float = 0.5) -> tuple[float, float, np.ndarray]:
    """Mean of R(u (1 - D chi(T, u) / 2)) over the given stationary states."""
    grid = cfg.grid
    vals = []
    for j, u in enumerate(states):
        ge = estimate_Dchi(u, T, spec, cfg, seed, n_mc, gamma, replica_offset=j * n_mc)
        g = u * (1.0 - 0.5 * ge.values)
        vals.append(float(overlap_array(spec, grid, g)))
    m, e = _mean_err(vals)
    return float(m), float(e), np.array(vals)


def sigma2_var(log_Z: np.ndarray, t: float, gamma: float) -> tuple[float, float]:
    """Sample variance of (log Z_t + gamma t)/sqrt(t) with its normal-theory error."""
    z = (np.asarray(log_Z, dtype=float) + gamma * t) / math.sqrt(t)
    n = len(z)
    if n < 3:
        raise InsufficientSamples("need at least three replicas")
    s2 = float(z.var(ddof=1))
    return s2, s2 * math.sqrt(2.0 / (n - 1))


def estimate_sigma2(states: np.ndarray | None, log_Z: np.ndarray | None, t: float, spec, cfg: SchemeConfig,
                    seed: int, gamma: float, T: float = 1.0, n_mc: int = 16) -> SigmaEstimate:
    qm = qe = vm = ve = math.nan
    n_states = 0
    if states is not None:
        qm, qe, vals = sigma2_qv(states, T, spec, cfg, seed, n_mc, gamma)
        n_states = len(vals)
    if log_Z is not None:
        vm, ve = sigma2_var(log_Z, t, gamma)
    if states is None and log_Z is None:
        raise InsufficientSamples("need stationary states or replica log Z values")
    return SigmaEstimate(qm, qe, vm, ve, t, n_states, 0 if log_Z is None else len(log_Z))


def report_dict(gamma: GammaEstimate | None = None, sigma: SigmaEstimate | None = None,
                chi: CorrectorEstimate | None = None, grad: GradientEstimate | None = None) -> dict:
    """JSON-ready summary; absent pieces are reported as null."""
    out = {"gamma": None, "sigma2_qv": None, "sigma2_var": None, "chi_profile": [], "orthogonality_check": None}
    if gamma is not None:
        out["gamma"] = {"value": gamma.value, "stderr": gamma.stderr, "burn_in": gamma.burn_in,
                        "n_samples": gamma.n_samples}
    if sigma is not None:
        out["sigma2_qv"] = {"value": sigma.sigma2_qv, "stderr": sigma.stderr_qv, "n_states": sigma.n_states}
        out["sigma2_var"] = {"value": sigma.sigma2_var, "stderr": sigma.stderr_var, "t": sigma.t_var,
                             "n_replicas": sigma.n_replicas}
    if chi is not None:
        out["chi"] = {"value": chi.value, "stderr": chi.stderr, "tail_bound": chi.tail_bound,
                      "gamma_bias_per_T": chi.gamma_bias_per_T, "T": chi.T}
        out["chi_profile"] = [{"t": float(t), "ptr_tilde": float(p)} for t, p in zip(chi.times, chi.ptr_tilde)]
    if grad is not None:
        out["orthogonality_check"] = {
            "pairing": grad.orthogonality, "stderr": grad.orthogonality_stderr,
            "passed": bool(abs(grad.orthogonality) <= 3 * grad.orthogonality_stderr + ORTHOGONALITY_FLOOR),
        }
    return out
