"""Uniform periodic grid on [0,1)^d, field containers and spectral transforms.

Spectral convention: for a field f on the grid the coefficients are

    c_k = h^d * sum_i f_i exp(-i 2 pi k . x_i),     x_i = i h,

so that f_i = sum_k c_k exp(i 2 pi k . x_i) and c_0 is the integral of f.
Coefficient arrays are stored in numpy FFT order over the last ``d`` axes.
Leading axes, if any, are treated as a batch.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatch, NegativeValue, NonpositiveMass

NEGATIVE_CLAMP_TOL = 1e-14


@dataclass(frozen=True)
class TorusGrid:
    dim: int
    points_per_dim: int

    def __post_init__(self):
        n = self.points_per_dim
        if self.dim < 1:
            raise GridMismatch(f"dim must be >= 1, got {self.dim}")
        if n < 4 or n & (n - 1):
            raise GridMismatch(f"points_per_dim must be a power of two >= 4, got {n}")

    @property
    def n(self) -> int:
        return self.points_per_dim

    @property
    def spacing(self) -> float:
        # exact for powers of two
        return 1.0 / self.points_per_dim

    h = spacing

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.dim, 0))

    def coords(self) -> np.ndarray:
        """Cell coordinates, shape ``(n,)`` in d=1 and ``(*shape, d)`` otherwise."""
        x = np.arange(self.n) * self.spacing
        if self.dim == 1:
            return x
        mesh = np.meshgrid(*([x] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    def wavenumbers(self) -> list[np.ndarray]:
        """Integer frequencies per axis, broadcastable against ``shape``."""
        k1 = np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(np.int64)
        out = []
        for ax in range(self.dim):
            sh = [1] * self.dim
            sh[ax] = self.n
            out.append(k1.reshape(sh))
        return out

    def k_squared(self) -> np.ndarray:
        ks = self.wavenumbers()
        total = np.zeros(self.shape)
        for k in ks:
            total = total + k.astype(float) ** 2
        return total

    def integrate(self, values) -> np.ndarray | float:
        values = np.asarray(values, dtype=float)
        return self.cell_volume * values.sum(axis=self.axes)

    def fft(self, values) -> np.ndarray:
        return self.cell_volume * np.fft.fftn(values, axes=self.axes)

    def ifft(self, coeffs) -> np.ndarray:
        return np.fft.ifftn(coeffs, axes=self.axes).real / self.cell_volume

    def nearest_cell(self, point) -> tuple[int, ...]:
        p = np.atleast_1d(np.asarray(point, dtype=float)) % 1.0
        if p.size != self.dim:
            raise GridMismatch(f"point has {p.size} coordinates, grid has dim {self.dim}")
        return tuple(int(v) for v in np.rint(p * self.n).astype(int) % self.n)

    def delta(self, point=0.0) -> np.ndarray:
        """Grid Dirac mass: 1/h^d in the nearest cell."""
        out = np.zeros(self.shape)
        out[self.nearest_cell(point)] = 1.0 / self.cell_volume
        return out

    def check_values(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-self.dim :] != self.shape:
            raise GridMismatch(f"values of shape {values.shape} do not fit grid {self.shape}")
        return values


@dataclass(frozen=True)
class Field:
    grid: TorusGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.grid.check_values(self.values), dtype=float)
        if vals.shape != self.grid.shape:
            raise GridMismatch(f"field values must have shape {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __add__(self, other: Field) -> Field:
        _same_grid(self, other)
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: Field) -> Field:
        _same_grid(self, other)
        return Field(self.grid, self.values - other.values)

    def __mul__(self, a) -> Field:
        if isinstance(a, Field):
            _same_grid(self, a)
            return Field(self.grid, self.values * a.values)
        return Field(self.grid, self.values * float(a))

    __rmul__ = __mul__


@dataclass(frozen=True)
class DensityField(Field):
    certified: bool = True
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        super().__post_init__()
        if np.any(self.values < 0):
            raise NegativeValue("density has negative entries")
        mass = self.grid.integrate(self.values)
        if abs(mass - 1.0) > 1e-12:
            raise NonpositiveMass(f"density integrates to {mass!r}, not 1")


@dataclass(frozen=True)
class Spectrum:
    grid: TorusGrid
    coeffs: np.ndarray

    def coefficient(self, k) -> complex:
        k = np.atleast_1d(np.asarray(k, dtype=int))
        if np.any(np.abs(k) > self.grid.n // 2):
            raise IndexError(f"frequency {k} outside |k_j| <= {self.grid.n // 2}")
        return complex(self.coeffs[tuple(int(v) % self.grid.n for v in k)])


def _same_grid(a, b):
    if a.grid != b.grid:
        raise GridMismatch(f"grid mismatch: {a.grid} vs {b.grid}")


def integrate(f: Field) -> float:
    return float(f.grid.integrate(f.values))


def to_spectrum(f: Field) -> Spectrum:
    return Spectrum(f.grid, f.grid.fft(f.values))


def from_spectrum(s: Spectrum) -> Field:
    if s.coeffs.shape != s.grid.shape:
        raise GridMismatch(f"spectrum of shape {s.coeffs.shape} does not fit grid {s.grid.shape}")
    return Field(s.grid, s.grid.ifft(s.coeffs))


def clamp_negatives(values: np.ndarray, tol: float = NEGATIVE_CLAMP_TOL) -> tuple[np.ndarray, int]:
    """Zero out tiny negatives; raise on anything below ``-tol``."""
    values = np.asarray(values, dtype=float)
    if np.any(values < -tol):
        raise NegativeValue(f"minimum value {values.min()!r} below -{tol}")
    neg = values < 0
    count = int(neg.sum())
    if count:
        values = np.where(neg, 0.0, values)
    return values, count


def normalize_to_density(f: Field) -> tuple[DensityField, float]:
    """Rescale a nonnegative field to unit mass.

    Returns the density and the log of the original mass.
    """
    values, clamped = clamp_negatives(f.values)
    mass = f.grid.integrate(values)
    if not mass > 0:
        raise NonpositiveMass(f"field mass {mass!r} is not positive")
    return DensityField(f.grid, values / mass, clamped=clamped), float(np.log(mass))


def uniform(grid: TorusGrid) -> DensityField:
    return DensityField(grid, np.ones(grid.shape))


def dirac(grid: TorusGrid, point=0.0) -> DensityField:
    return DensityField(grid, grid.delta(point))


# --- serialization -------------------------------------------------------


def write_csv(f: Field, path) -> None:
    """One row per cell: coordinates (row-major) followed by the value."""
    g = f.grid
    x = g.coords().reshape(g.size, g.dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(g.dim)] + ["value"])
        for xi, v in zip(x, f.values.reshape(-1)):
            w.writerow([repr(float(c)) for c in xi] + [repr(float(v))])


def read_csv(path) -> Field:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d = len(rows[0]) - 1
    vals = np.array([float(r[-1]) for r in rows[1:]])
    n = round(len(vals) ** (1.0 / d))
    grid = TorusGrid(d, n)
    return Field(grid, vals.reshape(grid.shape))


_HEADER = struct.Struct("<II")


def write_binary(f: Field, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(f.grid.dim, f.grid.n))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_binary(path) -> Field:
    raw = Path(path).read_bytes()
    d, n = _HEADER.unpack_from(raw)
    grid = TorusGrid(d, n)
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return Field(grid, vals.reshape(grid.shape).copy())
