"""Replica orchestration and normality diagnostics for the rescaled free energy."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, InsufficientSamples, NumericalError
from .noise import NoisePath
from .she import SchemeConfig, run

# Replicas are grouped in chunks of this size no matter how many workers run,
# so every chunk performs the same floating-point operations in any setup.
CHUNK = 50
MIN_NORMALITY_SAMPLES = 100
FAILURE_LIMIT = 1e-3
QQ_LEVELS = (0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.975, 0.99)


class TooFewSamples(InsufficientSamples):
    pass


class TooManyFailures(NumericalError):
    pass


@dataclass(frozen=True)
class CltSample:
    replica: int
    t: float
    log_Z: float
    log_U: tuple
    seed: int

    def zeta(self, gamma: float) -> float:
        return self.log_Z + gamma * self.t


@dataclass
class ReplicaRun:
    samples: list
    n_requested: int
    failed: list

    @property
    def n_failed(self) -> int:
        return len(self.failed)

    @property
    def failure_fraction(self) -> float:
        return self.n_failed / self.n_requested

    def at(self, t: float) -> list:
        return [s for s in self.samples if abs(s.t - t) < 1e-12]

    def log_Z(self, t: float) -> np.ndarray:
        return np.array([s.log_Z for s in self.at(t)])


def probe_cells(grid, probes) -> list:
    return [grid.nearest_cell(p) for p in probes]


def _chunk_job(args):
    init, times, spec, cfg, seed, replicas, probes = args
    cells = probe_cells(cfg.grid, probes)

    def one(reps):
        path = NoisePath(spec, cfg.grid, cfg.dt, seed, list(reps))
        snaps = run(init, max(times), spec, cfg, path, times=times, keep_u=True)
        rows = []
        for j, r in enumerate(reps):
            for sn in snaps:
                lz = float(np.atleast_1d(sn.log_Z)[j])
                u = sn.u[j]
                lu = tuple(float(np.log(u[c]) + lz) for c in cells)
                rows.append(CltSample(int(r), float(sn.t), lz, lu, int(seed)))
        return rows

    try:
        return one(replicas), []
    except NumericalError:
        # isolate the failing replicas; streams are per replica so survivors are unchanged
        rows, failed = [], []
        for r in replicas:
            try:
                rows.extend(one([r]))
            except NumericalError:
                failed.append(int(r))
        return rows, failed


def run_replicas(init, times: Sequence[float], spec, cfg: SchemeConfig, n_rep: int, seed: int,
                 probes: Sequence = (0.0, 1.0 / 3.0, 2.0 / 3.0), workers: int = 1,
                 chunk: int = CHUNK) -> ReplicaRun:
    """Run ``n_rep`` independent replicas and record log Z and log U at ``probes``.

    The result depends only on (seed, config): replicas are cut into fixed
    chunks, and workers merely share the chunks out.
    """
    if n_rep < 2:
        raise ConfigError("need at least two replicas")
    cfg.check(spec)
    times = sorted(float(t) for t in times)
    jobs = [(init, times, spec, cfg, seed, list(range(a, min(a + chunk, n_rep))), tuple(probes))
            for a in range(0, n_rep, chunk)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_chunk_job, jobs))
    else:
        results = [_chunk_job(j) for j in jobs]
    samples, failed = [], []
    for rows, bad in results:
        samples.extend(rows)
        failed.extend(bad)
    samples.sort(key=lambda s: (s.replica, s.t))
    return ReplicaRun(samples, n_rep, sorted(failed))


def check_failures(rr: ReplicaRun, limit: float = FAILURE_LIMIT) -> None:
    if rr.failure_fraction > limit:
        raise TooManyFailures(f"{rr.n_failed} of {rr.n_requested} replicas failed")


# --- normality ----------------------------------------------------------------


@dataclass
class NormalityReport:
    n: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    ks_statistic: float
    ks_pvalue: float
    ad_statistic: float
    ad_critical_5pct: float
    sigma2: float
    qq: list

    def to_dict(self) -> dict:
        return asdict(self)


def normality_report(x, sigma2: float) -> NormalityReport:
    """Moments, KS against N(0, sigma2) and an Anderson-Darling statistic.

    ``sigma2`` is treated as known, so the KS p-value ignores the fact that
    it was estimated.
    """
    x = np.asarray(x, dtype=float)
    if x.size < MIN_NORMALITY_SAMPLES:
        raise TooFewSamples(f"normality report needs >= {MIN_NORMALITY_SAMPLES} samples, got {x.size}")
    if not sigma2 > 0:
        raise ConfigError("sigma2 must be positive")
    sd = math.sqrt(sigma2)
    ks = stats.kstest(x, "norm", args=(0.0, sd))
    ad = stats.anderson(x, dist="norm")
    crit = float(ad.critical_values[list(ad.significance_level).index(5.0)])
    emp = np.quantile(x, QQ_LEVELS)
    theo = stats.norm.ppf(QQ_LEVELS, scale=sd)
    qq = [{"level": float(p), "theoretical": float(a), "empirical": float(b)} for p, a, b in zip(QQ_LEVELS, theo, emp)]
    return NormalityReport(
        n=int(x.size),
        mean=float(x.mean()),
        variance=float(x.var(ddof=1)),
        skewness=float(stats.skew(x)),
        excess_kurtosis=float(stats.kurtosis(x)),
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
        ad_statistic=float(ad.statistic),
        ad_critical_5pct=crit,
        sigma2=float(sigma2),
        qq=qq,
    )


def rescaled(rr: ReplicaRun, t: float, gamma: float) -> np.ndarray:
    return (rr.log_Z(t) + gamma * t) / math.sqrt(t)


# --- log U versus log Z -------------------------------------------------------


@dataclass
class GapReport:
    times: list
    mean_gap: list
    scaled_gap: list
    bounded: bool
    scaled_decreasing: bool

    def to_dict(self) -> dict:
        return asdict(self)


def logU_gap_check(samples: Sequence[CltSample], growth_limit: float = 1.5) -> GapReport:
    """Mean |log U(t, x_probe) - log Z_t| per time, averaged over replicas and probes.

    ``bounded`` compares the last time with the first against ``growth_limit``.
    """
    times = sorted({s.t for s in samples})
    gaps = []
    for t in times:
        d = [abs(lu - s.log_Z) for s in samples if s.t == t for lu in s.log_U]
        gaps.append(float(np.mean(d)) if d else math.nan)
    scaled = [g / math.sqrt(t) if t > 0 else math.inf for g, t in zip(gaps, times)]
    bounded = bool(len(gaps) < 2 or gaps[-1] <= growth_limit * gaps[0])
    decreasing = bool(all(b < a for a, b in zip(scaled, scaled[1:])))
    return GapReport(times, gaps, scaled, bounded, decreasing)


def variance_ratio(rr: ReplicaRun, t: float, gamma: float) -> float:
    """Var(zeta_2t) / (2 Var(zeta_t)); diffusive scaling puts this near 1."""
    a = rr.log_Z(t) + gamma * t
    b = rr.log_Z(2 * t) + gamma * 2 * t
    return float(b.var(ddof=1) / (2.0 * a.var(ddof=1)))


# --- output -------------------------------------------------------------------


def write_samples_csv(samples: Sequence[CltSample], path, n_probes: int | None = None) -> None:
    k = n_probes if n_probes is not None else (len(samples[0].log_U) if samples else 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "t", "logZ"] + [f"logU_{j}" for j in range(k)] + ["seed"])
        for s in samples:
            w.writerow([s.replica, f"{s.t:.17g}", f"{s.log_Z:.17g}"] + [f"{v:.17g}" for v in s.log_U] + [s.seed])


def read_samples_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        k = len(header) - 4
        for row in r:
            out.append(CltSample(int(row[0]), float(row[1]), float(row[2]),
                                 tuple(float(v) for v in row[3:3 + k]), int(row[-1])))
    return out


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
