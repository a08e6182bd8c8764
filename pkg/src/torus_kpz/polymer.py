"""Drift and diffusion operators of the endpoint-density SPDE, and a direct stepper.

    du = A(u) dt + sum_k B_k(u) dw_k
    A(f)   = 1/2 Lap f + f <f, R*f> - f R*f
    B_k(f) = f e_k - f <f, e_{-k}>,    e_k = sqrt(r_k) exp(i 2 pi k.x)

The direct stepper is a diagnostic that is compared against the
normalize-after-SHE route under identical noise. It is not used for
production runs.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, PositivityBreach, Unsupported
from .grid import DensityField, Field, TorusGrid
from .heat import semigroup_array
from .noise import SmoothFourier, convolve_R

FOUR_PI_SQ = 4.0 * np.pi**2


def _require_smooth(spec):
    if not isinstance(spec, SmoothFourier):
        raise Unsupported("the endpoint SPDE operators need a smooth band-limited covariance")


def spectral_laplacian(values: np.ndarray, grid: TorusGrid) -> np.ndarray:
    ks = grid.k_squared()
    spec = np.fft.fftn(values, axes=grid.axes)
    return np.fft.ifftn(-FOUR_PI_SQ * ks * spec, axes=grid.axes).real


def nonlinear_drift(u: np.ndarray, spec, grid: TorusGrid) -> np.ndarray:
    """The part of A without the Laplacian: u <u, R*u> - u R*u (batched)."""
    Ru = convolve_R(spec, grid, u)
    pairing = grid.integrate(u * Ru)
    return u * np.asarray(pairing)[(...,) + (None,) * grid.dim] - u * Ru


def drift_A(u: DensityField, spec) -> Field:
    _require_smooth(spec)
    g = u.grid
    return Field(g, 0.5 * spectral_laplacian(u.values, g) + nonlinear_drift(u.values, spec, g))


def _e_k(spec, grid: TorusGrid, k) -> tuple[np.ndarray, np.ndarray]:
    k = tuple(int(v) for v in np.atleast_1d(k))
    if len(k) != grid.dim:
        raise ConfigError(f"frequency {k} has wrong dimension")
    if max(abs(v) for v in k) > spec.band:
        raise ConfigError(f"frequency {k} outside the noise band {spec.band}")
    x = grid.coords().reshape(grid.size, grid.dim)
    phase = (2.0 * np.pi * x @ np.asarray(k, dtype=float)).reshape(grid.shape)
    amp = np.sqrt(spec.r(k))
    return amp * np.cos(phase), amp * np.sin(phase)


def diffusion_B(u: DensityField, k, spec) -> tuple[Field, Field]:
    """B_k(u) as a (real part, imaginary part) pair of fields."""
    _require_smooth(spec)
    g = u.grid
    c, s = _e_k(spec, g, k)
    # <u, e_{-k}> = int u e_k
    pc, ps = g.integrate(u.values * c), g.integrate(u.values * s)
    return Field(g, u.values * (c - pc)), Field(g, u.values * (s - ps))


def operator_norms(u: np.ndarray, spec, grid: TorusGrid) -> tuple[float, float]:
    """(||A(u)||_L2, sum_k ||B_k(u)||_L2^2) for one density array."""
    A = 0.5 * spectral_laplacian(u, grid) + nonlinear_drift(u, spec, grid)
    a_norm = float(np.sqrt(grid.integrate(A**2)))
    dens = DensityField(grid, u / grid.integrate(u))
    total = 0.0
    for k, r in spec.coeffs:
        if r > 0:
            re, im = diffusion_B(dens, k, spec)
            total += float(grid.integrate(re.values**2 + im.values**2))
    return a_norm, total


def spde_step_array(u: np.ndarray, dW: np.ndarray, dt: float, spec, grid: TorusGrid):
    """Euler-Maruyama step on raw arrays; returns (u_new, mass_before_renorm, clamped).

    The noise sum over modes collapses to u (dW - int u dW). The heat part
    is integrated exactly, which keeps the scheme stable at grid-scale dt.
    """
    mdW = grid.integrate(u * dW)
    incr = nonlinear_drift(u, spec, grid) * dt + u * (dW - np.asarray(mdW)[(...,) + (None,) * grid.dim])
    new = semigroup_array(u + incr, grid, dt)
    neg = new < 0
    clamped = int(neg.sum())
    if clamped:
        frac = neg.reshape(*neg.shape[: -grid.dim], -1).mean(axis=-1)
        if np.any(frac > 1e-3):
            raise PositivityBreach(f"direct SPDE step produced negatives in {frac.max():.2%} of cells")
        new = np.where(neg, 0.0, new)
    mass = grid.integrate(new)
    return new / np.asarray(mass)[(...,) + (None,) * grid.dim], mass, clamped


def spde_step_direct(u: DensityField, dt: float, dW: Field, spec) -> DensityField:
    """One direct step driven by the same increment field a she_step would use."""
    _require_smooth(spec)
    new, _, _ = spde_step_array(u.values, dW.values, dt, spec, u.grid)
    return DensityField(u.grid, new)
