"""Time stepping of the multiplicative stochastic heat equation (Ito).

The solution is never stored unnormalized. Each step advances the current
endpoint density u (unit mass), renormalizes, and adds the log of the new
mass to log Z. The martingale M and its bracket are accumulated alongside:
M picks up int u dW with the pre-step density, the bracket picks up
R(u, u) dt.

All stepping routines accept arrays with leading batch axes, so many
replicas (or all propagator columns) advance in one vectorized call.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import BlowUp, ConfigError
from .grid import DensityField, Field, TorusGrid
from .heat import semigroup_array
from .noise import NoisePath, SmoothFourier, WhiteNoise1d, check_compatible, overlap_array

ROUNDOFF_REL = 1e-12
BREACH_FRACTION = 1e-3


class Scheme(str, Enum):
    EXP_EULER = "exp_euler"
    FD_EULER_WHITE = "fd_euler_white"


@dataclass(frozen=True)
class SchemeConfig:
    grid: TorusGrid
    dt: float
    scheme: Scheme = Scheme.EXP_EULER
    clamp_floor: float = 1e-300

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")

    def check(self, spec) -> None:
        check_compatible(spec, self.grid)
        if self.scheme is Scheme.EXP_EULER and isinstance(spec, WhiteNoise1d):
            raise ConfigError("exp_euler needs a smooth covariance; use fd_euler_white for white noise")
        if self.scheme is Scheme.FD_EULER_WHITE:
            if isinstance(spec, SmoothFourier):
                raise ConfigError("fd_euler_white is for white noise only")
            limit = 0.25 * self.grid.spacing**2
            if self.dt > limit * (1 + 1e-12):
                raise ConfigError(f"fd_euler_white requires dt <= h^2/4 = {limit!r}, got dt = {self.dt!r}")

    def steps_for(self, t: float) -> int:
        k = round(t / self.dt)
        if not math.isclose(k * self.dt, t, rel_tol=1e-9, abs_tol=1e-12):
            raise ConfigError(f"time {t} is not a multiple of dt = {self.dt}")
        return int(k)


@dataclass
class MartingaleLedger:
    M: np.ndarray | float = 0.0
    QV: np.ndarray | float = 0.0
    records: list | None = None

    def add(self, m_inc, qv_inc) -> None:
        self.M = self.M + m_inc
        self.QV = self.QV + qv_inc
        if self.records is not None:
            self.records.append((np.copy(m_inc), np.copy(qv_inc)))


@dataclass
class SheState:
    """Current density (possibly batched) with accumulated log Z and ledger."""

    grid: TorusGrid
    u: np.ndarray
    step: int = 0
    dt: float = 0.0
    log_mass: np.ndarray | float = 0.0
    ledger: MartingaleLedger = field(default_factory=MartingaleLedger)
    clamped: int = 0
    breach_steps: int = 0

    @property
    def time(self) -> float:
        return self.step * self.dt

    def density(self) -> DensityField:
        if self.u.ndim != self.grid.dim:
            raise ValueError("density() is only defined for unbatched states")
        return DensityField(self.grid, self.u / self.grid.integrate(self.u))

    def copy(self) -> SheState:
        led = MartingaleLedger(np.copy(self.ledger.M), np.copy(self.ledger.QV), None)
        return replace(self, u=self.u.copy(), log_mass=np.copy(self.log_mass), ledger=led)


def initial_density(init, grid: TorusGrid) -> np.ndarray:
    """Unit-mass array from a DensityField/Field/array, "uniform", or ("dirac", y)."""
    if isinstance(init, str):
        if init == "uniform":
            return np.ones(grid.shape)
        raise ConfigError(f"unknown initial condition {init!r}")
    if isinstance(init, tuple) and init and init[0] == "dirac":
        return grid.delta(init[1] if len(init) > 1 else 0.0)
    vals = init.values if isinstance(init, Field) else np.asarray(init, dtype=float)
    vals = grid.check_values(vals)
    if np.any(vals < 0):
        raise ConfigError("initial data must be nonnegative")
    mass = grid.integrate(vals)
    if np.any(mass <= 0):
        raise ConfigError("initial data must have positive mass")
    return vals / np.asarray(mass)[(...,) + (None,) * grid.dim]


def _expand(a, grid):
    return np.asarray(a)[(...,) + (None,) * grid.dim]


def discrete_laplacian(u: np.ndarray, grid: TorusGrid) -> np.ndarray:
    out = -2.0 * grid.dim * u
    for ax in grid.axes:
        out = out + np.roll(u, 1, axis=ax) + np.roll(u, -1, axis=ax)
    return out / grid.spacing**2


def linear_step(u: np.ndarray, dW: np.ndarray, spec, cfg: SchemeConfig) -> np.ndarray:
    """The scheme's one-step map, which is linear in ``u`` for fixed noise."""
    grid = cfg.grid
    if cfg.scheme is Scheme.EXP_EULER:
        R0 = spec.R0 if isinstance(spec, SmoothFourier) else 0.0
        return semigroup_array(u * np.exp(dW - 0.5 * R0 * cfg.dt), grid, cfg.dt)
    return u + 0.5 * cfg.dt * discrete_laplacian(u, grid) + u * dW


def raw_step(u: np.ndarray, dW: np.ndarray, spec, cfg: SchemeConfig):
    """One unnormalized step. Returns (u_tilde, clamped_count, breach_steps)."""
    grid = cfg.grid
    ut = linear_step(u, dW, spec, cfg)
    scale = np.max(np.abs(ut), axis=grid.axes, keepdims=True)
    neg = ut <= 0
    if not neg.any():
        return ut, 0, 0
    # FFT round-off below zero is expected far from a concentrated mass
    genuine = ut < -ROUNDOFF_REL * scale
    count = int(genuine.sum())
    breach = 0
    if count:
        per_sample = genuine.reshape(*genuine.shape[: -grid.dim], -1).mean(axis=-1)
        breach = int(np.sum(per_sample > BREACH_FRACTION))
    ut = np.where(neg, cfg.clamp_floor, ut)
    return ut, count, breach


def step_arrays(u: np.ndarray, dW: np.ndarray, spec, cfg: SchemeConfig):
    """Advance normalized densities by one step.

    Returns ``(u_new, log_mass_inc, m_inc, qv_inc, clamped, breaches)``.
    ``m_inc`` and ``qv_inc`` use the pre-step ``u`` (non-anticipating).
    """
    grid = cfg.grid
    m_inc = grid.integrate(u * dW)
    qv_inc = overlap_array(spec, grid, u) * cfg.dt
    ut, clamped, breach = raw_step(u, dW, spec, cfg)
    mass = grid.integrate(ut)
    if not np.all(np.isfinite(mass)) or np.any(mass <= 0):
        raise BlowUp(f"non-finite or nonpositive mass after step: {mass}")
    return ut / _expand(mass, grid), np.log(mass), m_inc, qv_inc, clamped, breach


def she_step(state: SheState, spec, cfg: SchemeConfig, path: NoisePath) -> SheState:
    """Advance ``state`` one step using the path's increment for ``state.step``."""
    cfg.check(spec)
    dW = path.increment(state.step)
    u, dlog, m_inc, qv_inc, clamped, breach = step_arrays(state.u, dW, spec, cfg)
    state.ledger.add(m_inc, qv_inc)
    return SheState(
        grid=state.grid,
        u=u,
        step=state.step + 1,
        dt=cfg.dt,
        log_mass=state.log_mass + dlog,
        ledger=state.ledger,
        clamped=state.clamped + clamped,
        breach_steps=state.breach_steps + breach,
    )


@dataclass
class Snapshot:
    t: float
    log_Z: np.ndarray | float
    M: np.ndarray | float
    QV: np.ndarray | float
    min_u: np.ndarray | float
    max_u: np.ndarray | float
    overlap_uu: np.ndarray | float
    u: np.ndarray | None = None

    CSV_HEADER = ("t", "logZ", "M", "QV", "min_u", "max_u", "overlap_uu")

    def row(self) -> list[float]:
        return [float(self.t), float(self.log_Z), float(self.M), float(self.QV),
                float(self.min_u), float(self.max_u), float(self.overlap_uu)]


def snapshot(state: SheState, spec, keep_u: bool = True) -> Snapshot:
    g = state.grid
    return Snapshot(
        t=state.time,
        log_Z=np.copy(state.log_mass),
        M=np.copy(state.ledger.M),
        QV=np.copy(state.ledger.QV),
        min_u=state.u.min(axis=g.axes),
        max_u=state.u.max(axis=g.axes),
        overlap_uu=overlap_array(spec, g, state.u),
        u=state.u.copy() if keep_u else None,
    )


def start_state(init, cfg: SchemeConfig, start_step: int = 0, batch: int | None = None) -> SheState:
    u = initial_density(init, cfg.grid)
    if batch is not None and u.ndim == cfg.grid.dim:
        u = np.broadcast_to(u, (batch,) + u.shape).copy()
    zeros = np.zeros(u.shape[: u.ndim - cfg.grid.dim])
    zeros = zeros if zeros.ndim else 0.0
    return SheState(cfg.grid, u, start_step, cfg.dt, np.copy(zeros),
                    MartingaleLedger(np.copy(zeros), np.copy(zeros)))


def advance(state: SheState, n_steps: int, spec, cfg: SchemeConfig, path: NoisePath) -> SheState:
    for _ in range(n_steps):
        state = she_step(state, spec, cfg, path)
    return state


def run(init, t_end: float, spec, cfg: SchemeConfig, path: NoisePath,
        times: Sequence[float] | None = None, keep_u: bool = True) -> list[Snapshot]:
    """Integrate from ``init`` to ``t_end``; snapshot at ``times`` (default: t_end).

    If ``path`` is batched, ``init`` is broadcast over its replicas.
    """
    cfg.check(spec)
    n_end = cfg.steps_for(t_end)
    times = [t_end] if times is None else sorted(times)
    marks = {cfg.steps_for(t) for t in times}
    if max(marks) > n_end:
        raise ConfigError("snapshot time beyond t_end")
    state = start_state(init, cfg, batch=len(path.replicas) if path.batched else None)
    out = []
    if 0 in marks:
        out.append(snapshot(state, spec, keep_u))
    for _ in range(n_end):
        state = she_step(state, spec, cfg, path)
        if state.step in marks:
            out.append(snapshot(state, spec, keep_u))
    return out


def write_trajectory_csv(snaps: Sequence[Snapshot], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(Snapshot.CSV_HEADER)
        for s in snaps:
            w.writerow([f"{v:.17g}" for v in s.row()])


# --- propagator -------------------------------------------------------------


@dataclass
class Propagator:
    """Z_{t,s}(x_i, y_j) = exp(log_scale) * values[i, j] on a flattened grid."""

    grid: TorusGrid
    s: float
    t: float
    values: np.ndarray
    log_scale: float

    def matrix(self) -> np.ndarray:
        return self.values * math.exp(self.log_scale)

    def compose(self, earlier: Propagator) -> Propagator:
        """self o earlier, i.e. int Z_{t,r}(x, y') Z_{r,s}(y', y) dy'."""
        if not math.isclose(earlier.t, self.s, abs_tol=1e-12):
            raise ConfigError("propagators do not share an endpoint")
        v = self.values @ earlier.values * self.grid.cell_volume
        scale = np.abs(v).max()
        return Propagator(self.grid, earlier.s, self.t, v / scale, self.log_scale + earlier.log_scale + math.log(scale))


def evolve_columns(cols: np.ndarray, s: float, t: float, spec, cfg: SchemeConfig, path: NoisePath):
    """Evolve a batch of unnormalized fields under one shared noise window.

    Returns the evolved batch divided by a common factor and the log of
    that factor. The common factor keeps relative sizes between columns.
    """
    if path.batched:
        raise ConfigError("propagator columns share a single noise replica")
    grid = cfg.grid
    k0, k1 = cfg.steps_for(s), cfg.steps_for(t)
    u = np.array(cols, dtype=float)
    log_scale = 0.0
    for k in range(k0, k1):
        dW = path.increment(k)
        u, _, _ = raw_step(u, dW, spec, cfg)
        c = float(grid.integrate(u).mean())
        if not np.isfinite(c) or c <= 0:
            raise BlowUp("propagator column mass lost")
        u = u / c
        log_scale += math.log(c)
    return u, log_scale


def propagator(s: float, t: float, spec, cfg: SchemeConfig, path: NoisePath) -> Propagator:
    """Green's function over [s, t]: one column per grid source point."""
    cfg.check(spec)
    grid = cfg.grid
    if t - s < cfg.dt * (1 - 1e-9):
        raise ConfigError("propagator needs t - s >= dt")
    cols = np.eye(grid.size).reshape(grid.size, *grid.shape) / grid.cell_volume
    u, log_scale = evolve_columns(cols, s, t, spec, cfg, path)
    # column j of the matrix is the solution started at y_j
    return Propagator(grid, s, t, u.reshape(grid.size, grid.size).T.copy(), log_scale)
