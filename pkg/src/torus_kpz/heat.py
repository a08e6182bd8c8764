"""The periodic heat semigroup exp(t Laplacian / 2) on the unit torus."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, NumericalError
from .grid import Field, TorusGrid, clamp_negatives

TWO_PI_SQ = 2.0 * np.pi**2


class NonpositiveTime(NumericalError, ValueError):
    pass


class NegativeTime(NumericalError, ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    crossover_time: float = 0.15
    image_sum_radius: int = 6
    spectral_cutoff: float = 1e-17

    def __post_init__(self):
        if not self.crossover_time > 0:
            raise ConfigError("crossover_time must be positive")
        if self.image_sum_radius < 1:
            raise ConfigError("image_sum_radius must be >= 1")


DEFAULT_KERNEL = KernelConfig()


def _image_sum_1d(t: float, x: np.ndarray, radius: int) -> np.ndarray:
    x = (x + 0.5) % 1.0 - 0.5
    m = np.arange(-radius, radius + 1)
    z = x[..., None] + m
    return np.exp(-(z**2) / (2.0 * t)).sum(axis=-1) / np.sqrt(2.0 * np.pi * t)


def _fourier_sum_1d(t: float, x: np.ndarray, cutoff: float) -> np.ndarray:
    kmax = int(np.ceil(np.sqrt(-np.log(cutoff) / (TWO_PI_SQ * t)))) + 1
    k = np.arange(1, kmax + 1)
    terms = np.exp(-TWO_PI_SQ * k**2 * t) * np.cos(2.0 * np.pi * k * x[..., None])
    return 1.0 + 2.0 * terms.sum(axis=-1)


def eval_p(t: float, x, cfg: KernelConfig = DEFAULT_KERNEL, method: str | None = None,
           dim: int | None = None) -> np.ndarray:
    """Heat kernel p_t(x) on the torus; ``x`` has shape (..., d) or (...,) for d=1.

    ``method`` forces "images" or "fourier"; by default images are used for
    t <= crossover_time. Pass ``dim=1`` to read an array of any shape as
    one-dimensional points; otherwise a trailing axis of length > 1 holds
    coordinates.
    """
    if not t > 0:
        raise NonpositiveTime(f"heat kernel needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
        scalar = True
    else:
        scalar = False
    if method is None:
        method = "images" if t <= cfg.crossover_time else "fourier"
    if method == "images":
        one_d = lambda xi: _image_sum_1d(t, xi, cfg.image_sum_radius)
    elif method == "fourier":
        one_d = lambda xi: _fourier_sum_1d(t, xi, cfg.spectral_cutoff)
    else:
        raise ValueError(f"unknown method {method!r}")
    # the kernel factorizes over coordinates
    if dim == 1:
        out = one_d(x)
    elif x.ndim >= 2 and x.shape[-1] > 1:
        out = np.ones(x.shape[:-1])
        for j in range(x.shape[-1]):
            out = out * one_d(x[..., j])
    else:
        out = one_d(x[..., 0] if x.ndim >= 2 else x)
    return out[0] if scalar else out


@lru_cache(maxsize=256)
def _multiplier_1d(n: int, t: float) -> np.ndarray:
    # Aliased symbol sum_l exp(-2 pi^2 (k + l n)^2 t): the DFT of h * p_t sampled
    # on the grid, so the discrete convolution kernel is pointwise positive.
    k = np.fft.fftfreq(n, d=1.0 / n)
    if t == 0:
        return np.ones(n)
    reach = int(np.ceil(np.sqrt(40.0 / (TWO_PI_SQ * t)) / n)) + 1
    ls = np.arange(-reach, reach + 1)
    m = np.exp(-TWO_PI_SQ * (k[:, None] + ls[None, :] * n) ** 2 * t).sum(axis=1)
    # unit zero mode: the kernel is renormalized so mass is conserved exactly
    m = m / m[0]
    m.setflags(write=False)
    return m


def heat_multiplier(grid: TorusGrid, t: float) -> np.ndarray:
    m1 = _multiplier_1d(grid.n, float(t))
    out = np.ones(grid.shape)
    for ax in range(grid.dim):
        sh = [1] * grid.dim
        sh[ax] = grid.n
        out = out * m1.reshape(sh)
    return out


def semigroup_array(values: np.ndarray, grid: TorusGrid, t: float) -> np.ndarray:
    """Batched semigroup on raw arrays (last ``grid.dim`` axes are space)."""
    if t < 0:
        raise NegativeTime(f"semigroup needs t >= 0, got {t}")
    if t == 0:
        return np.array(values, dtype=float, copy=True)
    mult = heat_multiplier(grid, t)
    axes = grid.axes
    # real FFT along the last axis: keep only the nonnegative half of the multiplier
    half = mult[..., : grid.n // 2 + 1]
    spec = np.fft.rfftn(values, axes=axes)
    return np.fft.irfftn(spec * half, s=grid.shape, axes=axes)


def apply_semigroup(f: Field, t: float, density: bool = False) -> Field:
    """exp(t Laplacian / 2) applied to ``f``.

    With ``density=True`` round-off negatives are clamped (and larger ones
    raise), so a density maps to a density.
    """
    out = semigroup_array(f.values, f.grid, t)
    if density:
        out, _ = clamp_negatives(out, tol=1e-13 * max(1.0, float(np.abs(f.values).max())))
    return Field(f.grid, out)
