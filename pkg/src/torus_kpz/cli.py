"""Command-line entry point: ``torus-kpz <command> [--config PATH] ...``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 an
acceptance threshold checked by the command failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import clt as clt_mod
from . import corrector as corr
from . import ergodicity as erg
from .config import ExperimentConfig
from .errors import ConfigError, InsufficientSamples, NumericalError
from .grid import Field, write_csv
from .noise import NoisePath, SmoothFourier, WhiteNoise1d, overlap_array
from .she import initial_density, run, write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 2, 3, 4
SEED_ENV = "TORUS_KPZ_SEED"
# fixed replica offsets keep pilot runs and main runs on disjoint streams
PILOT_OFFSET = 1 << 20
ENSEMBLE_OFFSET = 1 << 21


def fmt(x) -> str:
    return f"{float(x):.17g}"


class Verdicts:
    def __init__(self):
        self.items = []

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.items.append((name, bool(ok)))
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        return ok

    @property
    def all_passed(self) -> bool:
        return all(ok for _, ok in self.items)

    def to_list(self):
        return [{"check": n, "passed": ok} for n, ok in self.items]


# --- config and seeds ---------------------------------------------------------


def _config_sets_seed(path) -> bool:
    if path is None:
        return False
    with open(path) as fh:
        return any(line.split("#", 1)[0].split("=", 1)[0].strip() == "seed" for line in fh)


def resolve_seed(args, cfg_path) -> int | None:
    """--seed wins, then a seed in the config file, then $TORUS_KPZ_SEED."""
    if args.seed is not None:
        return args.seed
    if _config_sets_seed(cfg_path):
        return None
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return None


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    seed = resolve_seed(args, args.config)
    cfg = cfg.with_overrides(seed=seed, workers=args.workers, out=args.out, format=args.format)
    return cfg.validate()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, files, extra=None) -> None:
    # worker count and output location do not change results; leaving them out
    # keeps manifests byte-identical across reruns
    echo = replace(cfg, workers=1, out=".")
    m = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": echo.to_text(),
        "outputs": sorted(files),
    }
    if extra:
        m.update(extra)
    clt_mod.write_json(m, out / "manifest.json")


def write_table(out: Path, stem: str, header, rows, format: str) -> str:
    if format == "json":
        name = stem + ".json"
        clt_mod.write_json([dict(zip(header, r)) for r in rows], out / name)
    else:
        name = stem + ".csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) if isinstance(v, float) else v for v in r])
    return name


# --- commands -----------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: Path, args) -> tuple[list, Verdicts, dict]:
    spec, sc = cfg.spec(), cfg.scheme_config()
    times = sorted(set(cfg.snapshot_times) | {0.0, cfg.t_end})
    path = NoisePath(spec, sc.grid, sc.dt, cfg.seed, 0)
    snaps = run(cfg.init_value(), cfg.t_end, spec, sc, path, times=times)
    files = []
    if cfg.format == "csv":
        write_trajectory_csv(snaps, out / "trajectory.csv")
        files.append("trajectory.csv")
    else:
        files.append(write_table(out, "trajectory", list(snaps[0].CSV_HEADER), [s.row() for s in snaps], "json"))
    write_csv(Field(sc.grid, snaps[-1].u), out / "u_final.csv")
    files.append("u_final.csv")
    last = snaps[-1]
    print(f"t = {fmt(last.t)}  logZ = {fmt(last.log_Z)}  M - QV/2 = {fmt(last.M - 0.5 * last.QV)}")
    return files, Verdicts(), {"final_logZ": float(last.log_Z)}


def cmd_coupling(cfg, out, args):
    spec, sc = cfg.spec(), cfg.scheme_config()
    path = NoisePath(spec, sc.grid, sc.dt, cfg.seed, list(range(cfg.replicas)))
    nu1 = cfg.init_value() if cfg.init != "uniform" else ("dirac", 0.5 if sc.grid.dim == 1 else (0.5,) * sc.grid.dim)
    rec = erg.coupled_run(nu1, "uniform", cfg.t_end, spec, sc, path, every=cfg.coupling_every)
    rows = [(float(t), float(a), float(b)) for t, a, b in
            zip(rec.t, rec.median_log("l1"), rec.median_log("linf"))]
    files = [write_table(out, "coupling", ["t", "median_log_l1", "median_log_linf"], rows, cfg.format)]
    v = Verdicts()
    fit = erg.fit_decay_rate(rec, window=cfg.coupling_window)
    print(f"rate = {fmt(fit.rate)}  R2 = {fmt(fit.r_squared)}  points = {fit.n_points}")
    v.check("coupling decay rate > 0", fit.rate > 0, fmt(fit.rate))
    v.check("coupling fit R2 > 0.9", fit.r_squared > 0.9, fmt(fit.r_squared))
    clt_mod.write_json({"rate": fit.rate, "prefactor": fit.prefactor, "r_squared": fit.r_squared,
                        "n_points": fit.n_points, "window": list(cfg.coupling_window)}, out / "coupling_fit.json")
    files.append("coupling_fit.json")
    return files, v, {}


def _ensemble(cfg, spec, sc):
    return erg.sample_invariant(spec, sc, cfg.burn_in, cfg.n_samples, cfg.thinning, cfg.seed,
                                init=cfg.init_value(), n_replicas=min(cfg.replicas, cfg.n_samples),
                                replica_offset=ENSEMBLE_OFFSET)


def cmd_invariant(cfg, out, args):
    spec, sc = cfg.spec(), cfg.scheme_config()
    ens = _ensemble(cfg, spec, sc)
    flat = ens.samples.reshape(len(ens), -1)
    rows = [(i,) + tuple(float(x) for x in r) for i, r in enumerate(flat)]
    header = ["sample"] + [f"u_{j}" for j in range(flat.shape[1])]
    files = [write_table(out, "invariant_samples", header, rows, cfg.format)]
    v = Verdicts()
    if isinstance(spec, SmoothFourier):
        R = overlap_array(spec, sc.grid, ens.samples)
        v.check("overlap >= 1 on every sample", bool(np.all(R >= 1 - 1e-9)), fmt(R.min()))
    if isinstance(spec, WhiteNoise1d):
        rep = erg.bridge_compare(ens)
        files.append(write_table(out, "bridge", ["x", "emp_var", "target_var"], list(rep.rows()), cfg.format))
        print(f"max variance deviation = {fmt(rep.max_var_dev)}  samples = {rep.n_samples}")
        v.check("bridge variance deviation <= 0.05", rep.max_var_dev <= 0.05, fmt(rep.max_var_dev))
    return files, v, {}


def cmd_gamma(cfg, out, args):
    spec, sc = cfg.spec(), cfg.scheme_config()
    g = corr.estimate_gamma(spec, sc, cfg.seed, cfg.burn_in, cfg.gamma_t_avg, n_replicas=cfg.replicas,
                            init=cfg.init_value(), replica_offset=PILOT_OFFSET)
    print(f"gamma = {g.value:.4f} +/- {g.stderr:.4f}  ({fmt(g.value)} +/- {fmt(g.stderr)})")
    clt_mod.write_json(corr.report_dict(gamma=g), out / "gamma.json")
    v = Verdicts()
    v.check("gamma >= 0.5 - 3 stderr", g.value >= 0.5 - 3 * g.stderr, fmt(g.value))
    return ["gamma.json"], v, {"gamma": g.value}


def cmd_corrector(cfg, out, args):
    spec, sc = cfg.spec(), cfg.scheme_config()
    ens = _ensemble(cfg, spec, sc)
    gam = corr.gamma_from_ensemble(ens)
    v0 = initial_density(cfg.init_value(), sc.grid)
    n_mc = min(cfg.corrector_n_mc, len(ens))
    chi = corr.estimate_chi(v0, cfg.corrector_T, spec, sc, cfg.seed, n_mc, ensemble=ens, gamma_stderr=gam.stderr)
    grad = None
    verd = Verdicts()
    if isinstance(spec, SmoothFourier) and sc.grid.dim == 1 and sc.grid.size <= corr.MAX_GRADIENT_POINTS:
        grad = corr.estimate_Dchi(v0, cfg.corrector_T, spec, sc, cfg.seed, cfg.corrector_n_mc, gam.value)
        tol = 3 * grad.orthogonality_stderr + corr.ORTHOGONALITY_FLOOR
        verd.check("<v, Dchi(v)> within 3 stderr of 0", abs(grad.orthogonality) <= tol, fmt(grad.orthogonality))
        rows = [(float(x), float(a), float(b)) for x, a, b in
                zip(sc.grid.coords().reshape(-1), grad.values.reshape(-1), grad.stderr.reshape(-1))]
        files = [write_table(out, "dchi", ["x", "dchi", "stderr"], rows, cfg.format)]
    else:
        files = []
    print(f"chi = {fmt(chi.value)} +/- {fmt(chi.stderr)}  tail bound = {fmt(chi.tail_bound)}")
    clt_mod.write_json(corr.report_dict(gamma=gam, chi=chi, grad=grad), out / "corrector.json")
    return files + ["corrector.json"], verd, {}


def _load_gamma(path) -> tuple[float, float]:
    if not path:
        raise ConfigError("sigma needs a gamma artifact: pass --gamma PATH or set sigma.gamma_path")
    try:
        with open(path) as fh:
            g = json.load(fh)["gamma"]
        return float(g["value"]), float(g["stderr"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"cannot read gamma artifact {path}: {e}") from e


def cmd_sigma(cfg, out, args):
    gamma, gamma_err = _load_gamma(args.gamma or cfg.gamma_path)
    spec, sc = cfg.spec(), cfg.scheme_config()
    states = None
    if isinstance(spec, SmoothFourier) and sc.grid.dim == 1 and sc.grid.size <= corr.MAX_GRADIENT_POINTS:
        states = _ensemble(cfg, spec, sc).samples[: cfg.corrector_states]
    rr = clt_mod.run_replicas("uniform", [cfg.t_end], spec, sc, cfg.replicas, cfg.seed,
                              probes=cfg.probes, workers=cfg.workers)
    clt_mod.check_failures(rr)
    s = corr.estimate_sigma2(states, rr.log_Z(cfg.t_end), cfg.t_end, spec, sc, cfg.seed, gamma,
                             T=cfg.corrector_T, n_mc=cfg.corrector_n_mc)
    print(f"sigma2_qv = {fmt(s.sigma2_qv)} +/- {fmt(s.stderr_qv)}")
    print(f"sigma2_var = {fmt(s.sigma2_var)} +/- {fmt(s.stderr_var)}")
    v = Verdicts()
    if states is not None:
        v.check("sigma2_qv >= 1 - 3 stderr", s.sigma2_qv >= 1 - 3 * s.stderr_qv, fmt(s.sigma2_qv))
    v.check("sigma2_var >= 1 - 3 stderr", s.sigma2_var >= 1 - 3 * s.stderr_var, fmt(s.sigma2_var))
    clt_mod.write_json(corr.report_dict(gamma=corr.GammaEstimate(gamma, gamma_err, math.nan, 0), sigma=s),
                       out / "sigma.json")
    return ["sigma.json"], v, {}


def cmd_clt(cfg, out, args):
    spec, sc = cfg.spec(), cfg.scheme_config()
    if args.gamma or cfg.gamma_path:
        gamma, _ = _load_gamma(args.gamma or cfg.gamma_path)
    else:
        # pilot run on its own streams, so centering and testing use independent noise
        gamma = corr.estimate_gamma(spec, sc, cfg.seed, cfg.burn_in, cfg.gamma_t_avg,
                                    n_replicas=8, replica_offset=PILOT_OFFSET).value
    times = sorted(set(cfg.snapshot_times) | {cfg.t_end})
    rr = clt_mod.run_replicas(cfg.init_value(), times, spec, sc, cfg.replicas, cfg.seed,
                              probes=cfg.probes, workers=cfg.workers)
    clt_mod.check_failures(rr)
    clt_mod.write_samples_csv(rr.samples, out / "clt_samples.csv", len(cfg.probes))
    z = clt_mod.rescaled(rr, cfg.t_end, gamma)
    s2 = float(z.var(ddof=1))
    rep = clt_mod.normality_report(z, s2)
    clt_mod.write_json(rep.to_dict(), out / "normality.json")
    gap = clt_mod.logU_gap_check(rr.samples)
    summary = {"gamma": gamma, "sigma2": s2, "t": cfg.t_end, "n_replicas": cfg.replicas,
               "n_failed": rr.n_failed, "failed_replicas": rr.failed,
               "ks_statistic": rep.ks_statistic, "ks_pvalue": rep.ks_pvalue,
               "ad_statistic": rep.ad_statistic, "logU_gap": gap.to_dict()}
    clt_mod.write_json(summary, out / "summary.json")
    print(f"gamma = {fmt(gamma)}  sigma2 = {fmt(s2)}  KS p = {fmt(rep.ks_pvalue)}")
    v = Verdicts()
    v.check("KS p-value > 0.01", rep.ks_pvalue > 0.01, fmt(rep.ks_pvalue))
    return ["clt_samples.csv", "normality.json", "summary.json"], v, {}


COMMANDS = {
    "simulate": cmd_simulate,
    "coupling": cmd_coupling,
    "invariant": cmd_invariant,
    "gamma": cmd_gamma,
    "corrector": cmd_corrector,
    "sigma": cmd_sigma,
    "clt": cmd_clt,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torus-kpz", description="SHE / KPZ free-energy experiments on the torus")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None, help=f"master seed (fallback ${SEED_ENV})")
    common.add_argument("--workers", type=int, default=None, help="process count for replica runs")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--format", choices=["csv", "json"], default=None, help="table format")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("sigma", "clt"):
            sp.add_argument("--gamma", type=str, default=None, help="gamma.json from the gamma command")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        files, verdicts, extra = COMMANDS[args.command](cfg, out, args)
        write_manifest(out, args.command, cfg, files, dict(extra, verdicts=verdicts.to_list()))
    except (ConfigError, InsufficientSamples) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if verdicts.all_passed else EXIT_ACCEPT


if __name__ == "__main__":
    sys.exit(main())
