"""Gaussian forcing: covariance specs, replayable noise paths, the overlap functional.

Smooth noise is written with real Fourier modes. For every unordered pair
{k, -k}, k != 0, the complex Wiener increment dw_k = a + i b has independent
real parts of variance dt/2, and dw_{-k} is its conjugate. On the grid this
gives

    dW(x) = sqrt(r_0) dw_0 + sum_{k in H} 2 sqrt(r_k) (a_k cos 2 pi k.x - b_k sin 2 pi k.x)

where H holds one representative of each pair. Everything downstream works
with the real vector g of standard normals (g_0, g_a..., g_b...).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, GridMismatch, Unsupported
from .grid import Field, TorusGrid

BLOCK_STEPS = 256
_U64 = (1 << 64) - 1


# --- covariance specs ------------------------------------------------------


def _as_key(k, dim):
    k = tuple(int(v) for v in np.atleast_1d(k))
    if len(k) != dim:
        raise ConfigError(f"frequency {k} does not have {dim} components")
    return k


def _is_positive_half(k):
    for v in k:
        if v != 0:
            return v > 0
    return False


@dataclass(frozen=True)
class SmoothFourier:
    """Band-limited covariance given by its Fourier coefficients r_k."""

    dim: int
    coeffs: tuple  # sorted ((k tuple), r_k) pairs, both signs present

    kind = "smooth"

    def __post_init__(self):
        table = {}
        for k, r in self.coeffs:
            k = _as_key(k, self.dim)
            r = float(r)
            if not np.isfinite(r) or r < 0:
                raise ConfigError(f"coefficient r_{k} = {r} must be finite and >= 0")
            neg = tuple(-v for v in k)
            if neg in table and table[neg] != r:
                raise ConfigError(f"asymmetric coefficients: r_{k}={r}, r_{neg}={table[neg]}")
            table[k] = r
        for k, r in list(table.items()):
            table.setdefault(tuple(-v for v in k), r)
        zero = (0,) * self.dim
        if table.get(zero) != 1.0:
            raise ConfigError(f"r_0 must equal 1 (normalized covariance), got {table.get(zero)}")
        object.__setattr__(self, "coeffs", tuple(sorted(table.items())))

    @classmethod
    def from_pairs(cls, pairs, dim: int = 1) -> SmoothFourier:
        return cls(dim, tuple((k, r) for k, r in pairs))

    @classmethod
    def from_function(cls, R: Callable, dim: int = 1, n_quad: int = 256, tol: float = 1e-12) -> SmoothFourier:
        """Band-limit a covariance function, dropping r_k below ``tol``.

        ``R`` is rescaled to unit integral first.
        """
        g = TorusGrid(dim, n_quad)
        vals = np.asarray(R(g.coords()), dtype=float)
        rk = g.fft(vals).real
        rk = rk / rk.flat[0]
        kk = np.stack(np.meshgrid(*[np.fft.fftfreq(n_quad, 1.0 / n_quad).round().astype(int)] * dim, indexing="ij"), -1)
        pairs = [(tuple(kk[idx]), max(0.0, float(rk[idx]))) for idx in np.ndindex(g.shape) if rk[idx] > tol]
        return cls(dim, tuple(pairs))

    @cached_property
    def table(self) -> dict:
        return dict(self.coeffs)

    @property
    def band(self) -> int:
        return max(max(abs(v) for v in k) if k else 0 for k, r in self.coeffs if r > 0)

    def r(self, k) -> float:
        return self.table.get(_as_key(k, self.dim), 0.0)

    @cached_property
    def half_modes(self) -> tuple:
        return tuple(k for k, r in self.coeffs if r > 0 and _is_positive_half(k))

    @property
    def R0(self) -> float:
        return float(sum(r for _, r in self.coeffs))


@dataclass(frozen=True)
class WhiteNoise1d:
    dim: int = 1
    kind = "white"

    def __post_init__(self):
        if self.dim != 1:
            raise ConfigError("white noise is only supported in d = 1")


@dataclass(frozen=True)
class ZeroNoise:
    """Degenerate spec with no forcing; deterministic heat-flow control runs."""

    dim: int = 1
    kind = "none"
    R0 = 0.0


CovarianceSpec = SmoothFourier | WhiteNoise1d | ZeroNoise


def default_smooth_spec() -> SmoothFourier:
    return SmoothFourier.from_pairs([(0, 1.0), (1, 0.5), (2, 0.25)])


def constant_spec(dim: int = 1) -> SmoothFourier:
    """r_0 = 1 only, i.e. R == 1."""
    return SmoothFourier(dim, (((0,) * dim, 1.0),))


def check_compatible(spec, grid: TorusGrid) -> None:
    if spec.dim != grid.dim:
        raise GridMismatch(f"spec dimension {spec.dim} vs grid dimension {grid.dim}")
    if isinstance(spec, SmoothFourier) and not spec.band < grid.n // 2:
        raise ConfigError(f"noise band {spec.band} must be below n/2 = {grid.n // 2}")


def evaluate_R(spec, x) -> np.ndarray:
    """R(x) = sum_k r_k exp(i 2 pi k.x), real by symmetry."""
    if not isinstance(spec, SmoothFourier):
        raise Unsupported(f"R is not a function for {type(spec).__name__}")
    x = np.asarray(x, dtype=float)
    if spec.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    out = np.zeros(x.shape[:-1])
    for k, r in spec.coeffs:
        out = out + r * np.cos(2.0 * np.pi * (x @ np.asarray(k, dtype=float)))
    return out


# --- real mode projections on a grid ---------------------------------------


class ModeBasis:
    """Real cosine/sine modes of a smooth spec sampled on a grid."""

    def __init__(self, spec: SmoothFourier, grid: TorusGrid):
        check_compatible(spec, grid)
        self.spec, self.grid = spec, grid
        x = grid.coords().reshape(grid.size, grid.dim)
        H = spec.half_modes
        phases = 2.0 * np.pi * x @ np.asarray(H, dtype=float).reshape(len(H), grid.dim).T  # (cells, |H|)
        cos, sin = np.cos(phases).T, np.sin(phases).T
        # rows: 1, cos_k..., sin_k...
        self.modes = np.vstack([np.ones((1, grid.size)), cos, sin]).reshape(-1, *grid.shape)
        rH = np.array([spec.r(k) for k in H])
        r0 = spec.r((0,) * grid.dim)
        # overlap weights for the real coefficients (integrals against each row)
        self.weights = np.concatenate([[r0], 2.0 * rH, 2.0 * rH])
        # noise amplitude per standard normal, with the sin sign folded in
        self.amplitude = np.concatenate([[np.sqrt(r0)], np.sqrt(2.0 * rH), -np.sqrt(2.0 * rH)])
        self.noise_rows = self.amplitude[:, None] * self.modes.reshape(len(self.amplitude), -1)
        self.n_modes = len(self.weights)

    def project(self, values) -> np.ndarray:
        """Integrals of ``values`` against each real mode; shape (..., n_modes)."""
        flat = np.asarray(values).reshape(*np.shape(values)[: -self.grid.dim], self.grid.size)
        return self.grid.cell_volume * flat @ self.modes.reshape(self.n_modes, -1).T

    def synthesize(self, coeffs) -> np.ndarray:
        flat = np.asarray(coeffs) @ self.modes.reshape(self.n_modes, -1)
        return flat.reshape(*np.shape(coeffs)[:-1], *self.grid.shape)

    def field_from_normals(self, g, dt: float) -> np.ndarray:
        flat = np.sqrt(dt) * (np.asarray(g) @ self.noise_rows)
        return flat.reshape(*np.shape(g)[:-1], *self.grid.shape)


_BASIS_CACHE: dict = {}


def mode_basis(spec: SmoothFourier, grid: TorusGrid) -> ModeBasis:
    key = (spec, grid)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = ModeBasis(spec, grid)
    return _BASIS_CACHE[key]


# --- noise paths -----------------------------------------------------------


def n_normals(spec, grid: TorusGrid) -> int:
    """How many standard normals one time step consumes per replica."""
    if isinstance(spec, SmoothFourier):
        return 1 + 2 * len(spec.half_modes)
    if isinstance(spec, WhiteNoise1d):
        return grid.size
    return 0


def stream_key(seed: int, replica: int) -> np.ndarray:
    return np.array([int(seed) & _U64, int(replica) & _U64], dtype=np.uint64)


def _block_normals(seed: int, replica: int, block: int, steps: int, m: int) -> np.ndarray:
    # counter-based: block index lives in the high counter word, so any
    # (seed, replica, step) is addressable without replaying earlier steps
    bitgen = np.random.Philox(key=stream_key(seed, replica), counter=[0, 0, 0, block])
    return np.random.Generator(bitgen).standard_normal((steps, m))


@dataclass
class NoisePath:
    """Replayable per-step noise for one replica or a batch of replicas.

    ``replica`` may be an int (unbatched output) or a sequence of ints, in
    which case every returned array has a leading replica axis. ``coarsen``
    sums that many consecutive fine steps into one step of size
    ``coarsen * dt_fine``; paths with the same seed and different
    ``coarsen`` therefore carry the same Brownian motion.
    """

    spec: object
    grid: TorusGrid
    dt: float
    seed: int
    replica: int | Sequence[int] = 0
    coarsen: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        check_compatible(self.spec, self.grid)
        self.batched = not isinstance(self.replica, (int, np.integer))
        self.replicas = tuple(int(r) for r in (self.replica if self.batched else [self.replica]))
        self.m = n_normals(self.spec, self.grid)
        if isinstance(self.spec, SmoothFourier):
            self.basis = mode_basis(self.spec, self.grid)

    def with_replica(self, replica) -> NoisePath:
        return NoisePath(self.spec, self.grid, self.dt, self.seed, replica, self.coarsen)

    def _fine_normals(self, fine_step: int) -> np.ndarray:
        block, offset = divmod(fine_step, BLOCK_STEPS)
        cached = self._cache.get("block")
        if cached is None or cached[0] != block:
            data = np.stack([_block_normals(self.seed, r, block, BLOCK_STEPS, self.m) for r in self.replicas])
            self._cache["block"] = (block, data)
            cached = self._cache["block"]
        return cached[1][:, offset, :]

    def normals(self, step: int) -> np.ndarray:
        """Standard normals driving ``step``; shape (replicas, m) or (m,)."""
        if step < 0:
            raise ValueError("negative step index")
        if self.coarsen == 1:
            g = self._fine_normals(step)
        else:
            g = sum(self._fine_normals(step * self.coarsen + j) for j in range(self.coarsen))
            g = g / np.sqrt(self.coarsen)
        return g if self.batched else g[0]

    def increment(self, step: int) -> np.ndarray:
        """dW on the grid for ``step`` (time step*dt to (step+1)*dt)."""
        shape = (len(self.replicas),) if self.batched else ()
        if self.m == 0:
            return np.zeros(shape + self.grid.shape)
        g = self.normals(step)
        if isinstance(self.spec, SmoothFourier):
            return self.basis.field_from_normals(g, self.dt)
        return np.sqrt(self.dt / self.grid.cell_volume) * g.reshape(shape + self.grid.shape)


def sample_increment(spec, grid: TorusGrid, dt: float, path: NoisePath, step: int | None = None) -> Field:
    """One noise increment as a Field; advances ``path`` when ``step`` is None."""
    if path.batched:
        raise ValueError("sample_increment works on single-replica paths")
    if step is None:
        step = path._cache.get("next", 0)
        path._cache["next"] = step + 1
    if path.spec != spec or path.grid != grid or path.dt != dt:
        raise ConfigError("path was built for a different spec, grid or dt")
    return Field(grid, path.increment(step))


# --- overlap and convolution -----------------------------------------------


def overlap_array(spec, grid: TorusGrid, u, v=None) -> np.ndarray:
    """R(u, v) = int int R(x-y) u(x) v(y) dx dy, batched over leading axes."""
    if v is None:
        v = u
    if isinstance(spec, SmoothFourier):
        b = mode_basis(spec, grid)
        cu = b.project(u)
        cv = cu if v is u else b.project(v)
        return (cu * cv) @ b.weights
    if isinstance(spec, WhiteNoise1d):
        return grid.integrate(np.asarray(u) * np.asarray(v))
    return np.zeros(np.shape(u)[: -grid.dim])


def convolve_R(spec, grid: TorusGrid, u) -> np.ndarray:
    """(R * u)(x) on the grid."""
    if isinstance(spec, SmoothFourier):
        b = mode_basis(spec, grid)
        return b.synthesize(b.project(u) * b.weights)
    if isinstance(spec, WhiteNoise1d):
        return np.array(u, dtype=float)
    return np.zeros(np.shape(u))


def overlap(spec, u: Field, v: Field) -> float:
    if u.grid != v.grid:
        raise GridMismatch("overlap of fields on different grids")
    return float(overlap_array(spec, u.grid, u.values, v.values))
