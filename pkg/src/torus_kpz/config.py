"""Experiment configuration in a flat ``section.key = value`` text format.

Example::

    # default smooth covariance on a 64-point line
    noise.kind = smooth
    noise.coeffs = 0:1;1:0.5;2:0.25
    grid.dim = 1
    grid.n = 64
    scheme.name = exp_euler
    scheme.dt = 0.001
    run.t_end = 10.0
    seed = 1

Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
Frequencies in ``noise.coeffs`` are separated by ``;``; components of a
multi-dimensional frequency by ``,`` (``1,0:0.5``).
"""
from __future__ import annotations

import math
from dataclasses import MISSING, dataclass, field, fields, replace

from .errors import ConfigError
from .grid import TorusGrid
from .noise import SmoothFourier, WhiteNoise1d, ZeroNoise, check_compatible
from .she import Scheme, SchemeConfig


def _key(name, default, kind):
    return field(default=default, metadata={"key": name, "kind": kind})


def _floats(text: str) -> tuple:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _fmt(v, kind) -> str:
    if kind == "float":
        return repr(float(v))
    if kind == "floats":
        return ",".join(repr(float(x)) for x in v)
    if kind == "coeffs":
        return format_coeffs(v)
    return str(v)


def parse_coeffs(text: str) -> tuple:
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        try:
            k, r = item.split(":")
            out.append((tuple(int(v) for v in k.split(",")), float(r)))
        except ValueError as e:
            raise ConfigError(f"bad coefficient entry {item!r}; expected k:r or k1,k2:r") from e
    return tuple(out)


def format_coeffs(coeffs) -> str:
    return ";".join(",".join(str(v) for v in k) + ":" + repr(float(r)) for k, r in coeffs)


@dataclass(frozen=True)
class ExperimentConfig:
    noise_kind: str = _key("noise.kind", "smooth", "str")
    noise_coeffs: tuple = _key("noise.coeffs", (((0,), 1.0), ((1,), 0.5), ((2,), 0.25)), "coeffs")
    grid_dim: int = _key("grid.dim", 1, "int")
    grid_n: int = _key("grid.n", 64, "int")
    scheme: str = _key("scheme.name", "exp_euler", "str")
    dt: float = _key("scheme.dt", 1e-3, "float")
    t_end: float = _key("run.t_end", 1.0, "float")
    snapshot_times: tuple = _key("run.times", (), "floats")
    init: str = _key("run.init", "uniform", "str")
    replicas: int = _key("run.replicas", 100, "int")
    workers: int = _key("run.workers", 1, "int")
    seed: int = _key("seed", 0, "int")
    out: str = _key("output.dir", "out", "str")
    format: str = _key("output.format", "csv", "str")
    burn_in: float = _key("invariant.burn_in", 2.0, "float")
    thinning: float = _key("invariant.thinning", 0.5, "float")
    n_samples: int = _key("invariant.samples", 200, "int")
    gamma_t_avg: float = _key("gamma.t_avg", 20.0, "float")
    coupling_every: float = _key("coupling.every", 0.1, "float")
    coupling_window: tuple = _key("coupling.window", (2.0, 20.0), "floats")
    corrector_T: float = _key("corrector.T", 1.0, "float")
    corrector_n_mc: int = _key("corrector.n_mc", 16, "int")
    corrector_states: int = _key("corrector.states", 20, "int")
    gamma_path: str = _key("sigma.gamma_path", "", "str")
    probes: tuple = _key("clt.probes", (0.0, 1.0 / 3.0, 2.0 / 3.0), "floats")

    def __post_init__(self):
        coeffs = tuple((tuple(int(v) for v in k), float(r)) for k, r in self.noise_coeffs)
        object.__setattr__(self, "noise_coeffs", coeffs)
        object.__setattr__(self, "snapshot_times", tuple(float(v) for v in self.snapshot_times))
        object.__setattr__(self, "probes", tuple(float(v) for v in self.probes))
        object.__setattr__(self, "coupling_window", tuple(float(v) for v in self.coupling_window))

    # --- derived objects ---

    def grid(self) -> TorusGrid:
        return TorusGrid(self.grid_dim, self.grid_n)

    def spec(self):
        if self.noise_kind == "smooth":
            return SmoothFourier(self.grid_dim, self.noise_coeffs)
        if self.noise_kind == "white":
            return WhiteNoise1d(self.grid_dim)
        if self.noise_kind == "none":
            return ZeroNoise(self.grid_dim)
        raise ConfigError(f"noise.kind must be smooth, white or none, got {self.noise_kind!r}")

    def scheme_config(self) -> SchemeConfig:
        try:
            Scheme(self.scheme)
        except ValueError:
            raise ConfigError(f"unknown scheme.name {self.scheme!r}") from None
        return SchemeConfig(self.grid(), self.dt, self.scheme)

    def init_value(self):
        if self.init == "uniform":
            return "uniform"
        if self.init.startswith("dirac"):
            _, _, pos = self.init.partition(":")
            pt = _floats(pos) or (0.0,) * self.grid_dim
            return ("dirac", pt[0] if self.grid_dim == 1 else pt)
        raise ConfigError(f"run.init must be uniform or dirac:x, got {self.init!r}")

    def validate(self) -> ExperimentConfig:
        """Cross-field checks; returns self so calls can be chained."""
        spec = self.spec()
        cfg = self.scheme_config()
        check_compatible(spec, cfg.grid)
        cfg.check(spec)
        self.init_value()
        if not self.t_end > 0:
            raise ConfigError("run.t_end must be positive")
        for t in self.snapshot_times:
            if not 0 <= t <= self.t_end:
                raise ConfigError(f"snapshot time {t} outside [0, run.t_end]")
        if self.replicas < 1 or self.workers < 1:
            raise ConfigError("run.replicas and run.workers must be >= 1")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"output.format must be csv or json, got {self.format!r}")
        if not (self.seed >= 0 and self.seed < 2**64):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    # --- text format ---

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.metadata['key']} = {_fmt(getattr(self, f.name), f.metadata['kind'])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        by_key = {f.metadata["key"]: f for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in by_key:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            f = by_key[key]
            kind = f.metadata["kind"]
            try:
                if kind == "int":
                    kw[f.name] = int(val)
                elif kind == "float":
                    kw[f.name] = float(val)
                    if not math.isfinite(kw[f.name]):
                        raise ValueError(val)
                elif kind == "floats":
                    kw[f.name] = _floats(val)
                elif kind == "coeffs":
                    kw[f.name] = parse_coeffs(val)
                else:
                    kw[f.name] = val
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from e
        return cls(**kw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            with open(path) as fh:
                return cls.from_text(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def with_overrides(self, **kw) -> ExperimentConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def defaults() -> dict:
    return {f.metadata["key"]: (f.default if f.default is not MISSING else None) for f in fields(ExperimentConfig)}
