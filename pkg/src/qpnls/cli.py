"""Command line entry point: ``qpnls {simulate,normal-form,measure,verify}``.

Each run writes ``resolved-config.yaml``, ``summary.json`` and experiment
tables into ``--out``. The exit status is 0 when every check passes, 1 when
some check fails and 2 on configuration or module errors.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import polynomial
from .config import ConfigError, RunConfig, dump_resolved, load_config, parse_config
from .dynamics import ExperimentConfig, dumps_state, localization_experiment, records_csv
from .normal_form import BnfAborted, BnfConfig, BnfError, ledger_rows, run_bnf
from .resonance import ResonanceParams, estimate_resonant_measure
from .verifiers import NotCertified, verify_bgg85, verify_km98, verify_sw23


def check(name: str, measured: float, bound: float | None, expr: str, passed: bool | None) -> dict:
    return {"name": name, "measured": measured, "bound": bound, "bound_expr": expr, "pass": passed}


def write_table(out: Path, stem: str, columns: Sequence[str], rows: Sequence[Sequence[Any]], fmt: str) -> Path:
    """CSV with repr-formatted floats (byte-stable), or a JSON list of records."""
    if fmt == "json":
        path = out / f"{stem}.json"
        path.write_text(json.dumps([dict(zip(columns, r)) for r in rows], indent=1) + "\n")
        return path
    path = out / f"{stem}.csv"

    def cell(v):
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, bool):
            return str(v).lower()
        if v is None:
            return ""
        return str(v)

    lines = [",".join(columns)] + [",".join(cell(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_summary(out: Path, cfg: RunConfig, checks: list[dict], status: str = "complete", error: str | None = None):
    doc = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "status": status,
        "all_pass": status == "complete" and all(c["pass"] is not False for c in checks),
        "checks": checks,
    }
    if error:
        doc["error"] = error
    (out / "summary.json").write_text(json.dumps(doc, indent=1, default=_jsonable) + "\n")
    return doc


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x))


# --- experiments ---------------------------------------------------------------------


def run_simulate(cfg: RunConfig, out: Path, workers: int) -> list[dict]:
    p = cfg.params
    exp = ExperimentConfig(
        spec=cfg.potential,
        M=p["M"],
        j0=p["j0"],
        delta=p["delta"],
        epsilon1=p["epsilon1"],
        epsilon2=p["epsilon2"],
        gamma=p["gamma"],
        tau=p["tau"],
        n_samples=p["n_samples"],
        max_draws=p["max_draws"],
        seed=cfg.seed,
        t_end=p["t_end"],
        dt=p["dt"],
        cadence=p["cadence"],
        slope_factor=p["slope_factor"],
    )
    report = localization_experiment(exp)
    cols = ("t", "l2_norm", "energy", "barrier_mass@j0", "barrier_mass@j0+M^2")
    rows = []
    for s in report.samples:
        stem = f"trajectory_{s.index:04d}"
        if cfg.format == "csv":
            (out / f"{stem}.csv").write_text(records_csv(s.records))
        else:
            write_table(out, stem, cols, [(r.t, r.l2_norm, r.energy, r.mass_j0, r.mass_outer) for r in s.records], "json")
        if p["checkpoints"] and s.final is not None:
            (out / f"checkpoint_{s.index:04d}.txt").write_text(dumps_state(s.final))
        rows.append((s.index, *s.theta, *s.alpha, s.initial_barrier, s.max_barrier, s.slope, s.edge_mass))
    d = cfg.potential.d
    names = ["index", *[f"theta{i}" for i in range(d)], *[f"alpha{i}" for i in range(d)],
             "initial_barrier", "max_barrier", "slope", "edge_mass"]
    write_table(out, "samples", names, rows, cfg.format)
    two_delta = 2 * exp.delta
    checks = [
        check(f"barrier_mass_sample_{s.index}", s.max_barrier, two_delta, "sum_{|j|>j0+M^2}|q_j|^2 < 2*delta",
              s.max_barrier < two_delta)
        for s in report.samples
    ]
    checks.append(check("barrier_mass_all_samples", max((s.max_barrier for s in report.samples), default=0.0),
                        two_delta, "max over samples < 2*delta", report.mass_pass))
    checks.append(check("mass_growth_slope", report.max_slope, report.slope_bound,
                        f"slope <= {exp.slope_factor:g}*eps^(M+1)", report.slope_pass))
    checks.append(check("resonant_draws_excluded", float(len(report.resonant)), None, "informational", None))
    return checks


def run_normal_form(cfg: RunConfig, out: Path, workers: int) -> list[dict]:
    p = cfg.params
    bnf = BnfConfig(
        M=p["M"], j0=p["j0"], r=p["r"], epsilon1=p["epsilon1"], epsilon2=p["epsilon2"], tau=p["tau"],
        lie_order=p["lie_order"], size_cap_offset=p["size_cap_offset"], halo=p["halo"],
        retain_cap=p["retain_cap"], gamma=p["gamma"], prescan=p["prescan"],
    )
    result = run_bnf(cfg.potential, bnf)
    _write_ledger(out, result.ledger, cfg.format)
    (out / "Z_tilde.txt").write_text(polynomial.dumps(result.state.Z))
    (out / "R_tilde.txt").write_text(polynomial.dumps(result.state.R))
    return _ledger_checks(result.ledger)


def _write_ledger(out: Path, ledger, fmt: str) -> None:
    rows = ledger_rows(ledger)
    cols = ("step", "norm-name", "measured", "paper-bound", "pass")
    write_table(out, "ledger", cols, [tuple(r[c] for c in cols) for r in rows], fmt)


def _ledger_checks(ledger) -> list[dict]:
    return [check(f"{e.step}:{e.name}", e.measured, e.bound, e.bound_expr, e.passed) for e in ledger]


def run_measure(cfg: RunConfig, out: Path, workers: int) -> list[dict]:
    p = cfg.params
    spec = cfg.potential
    params = ResonanceParams(gamma=p["gamma"], L=spec.L, M=p["M"], j0=p["j0"], d=spec.d, tau=p["tau"],
                             strict=p["strict"])
    est = estimate_resonant_measure(params, spec, p["samples"], cfg.seed, workers)
    cols = ("seed", "S", "gamma", "L", "M", "j0", "d", "tau", "fraction", "ci_halfwidth")
    row = (cfg.seed, est.samples, params.gamma, spec.L, params.M, params.j0, spec.d, params.tau, est.fraction,
           est.ci_halfwidth)
    write_table(out, "measure", cols, [row], cfg.format)
    return [
        check("resonant_fraction", est.fraction, params.gamma, "meas <= gamma (Wilson 95% lower end)",
              est.within(params.gamma)),
        check("wilson_interval_low", est.wilson_low, None, "informational", None),
        check("wilson_interval_high", est.wilson_high, None, "informational", None),
    ]


def verify_battery(p: dict, seed: int) -> list[dict]:
    """BGG85 on random integer bases, KM98 analytic cases and the SW23 diagonal strip."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    checks = []
    violations, min_margin = 0, math.inf
    m = p["bgg85_max_entry"]
    for _ in range(p["bgg85_trials"]):
        r = int(rng.integers(1, 5))
        V = rng.integers(-m, m + 1, size=(r, r))
        w = rng.standard_normal(r)
        res = verify_bgg85(V, w)
        if not res.holds:
            violations += 1
        if res.rhs > 0:
            min_margin = min(min_margin, res.lhs / res.rhs)
    checks.append(check("bgg85_violations", float(violations), 0.0, "max|w.v| >= r^-1.5 M^(1-r)|w||det|",
                        violations == 0))
    checks.append(check("bgg85_min_lhs_over_rhs", min_margin, 1.0, "lhs/rhs >= 1", min_margin >= 1 - 1e-12))

    n = p["km98_grid"]
    km_cases = [
        ("km98_linear", lambda x: x, (0.0, 1.0), 1, 1.0, 0.1, lambda x: np.ones_like(x)),
        ("km98_linear_gamma0", lambda x: x, (0.0, 1.0), 1, 1.0, 0.0, lambda x: np.ones_like(x)),
        ("km98_quadratic", lambda x: x * x, (-1.0, 1.0), 2, 2.0, 0.01, lambda x: np.full_like(x, 2.0)),
        ("km98_cubic", lambda x: x**3 - 0.5 * x, (-1.0, 1.0), 3, 6.0, 0.001, lambda x: np.full_like(x, 6.0)),
    ]
    for name, f, interval, k, A, gamma, fk in km_cases:
        res = verify_km98(f, interval, k, A, gamma, n_grid=n, fk=fk)
        checks.append(check(name, res.measure, res.bound, "meas <= zeta_k (gamma/A)^(1/k)", res.holds))

    lo, hi = p["sw23_exponents"]
    eps = [2.0**-e for e in range(lo, hi + 1)]
    strip = verify_sw23(lambda x, y: x + y - 1.0, ([0.0, 0.0], [1.0, 1.0]), (1.0, 1.0), 1, 0.99, eps,
                        n_grid=p["sw23_grid"], derivs=[lambda x, y: np.full_like(x, 2.0)])
    checks.append(check("sw23_strip_bounded", max(strip.ratios), 2 * strip.ratios[0],
                        "meas/eps^(1/k) bounded along dyadic eps", strip.bounded))
    within = all(1.0 <= r <= 4.0 for r in strip.ratios)
    checks.append(check("sw23_strip_ratio_vs_exact", max(abs(r - 2.0) for r in strip.ratios), 2.0,
                        "ratio within factor 2 of exact value 2", within))
    line = verify_sw23(lambda x: x, ([0.0], [1.0]), (1.0,), 1, 0.99, eps, n_grid=1 << 20,
                       derivs=[lambda x: np.ones_like(x)])
    km = [verify_km98(lambda x: x, (0.0, 1.0), 1, 0.99, e, n_grid=1 << 20).measure for e in eps]
    gap = max(abs(a - b) for a, b in zip(line.measures, km))
    checks.append(check("sw23_1d_matches_km98", gap, 2.0 / (1 << 20), "|meas_sw23 - meas_km98| <= 2h",
                        gap <= 2.0 / (1 << 20)))
    return checks


def run_verify(cfg: RunConfig, out: Path, workers: int) -> list[dict]:
    checks = verify_battery(cfg.params, cfg.seed)
    cols = ("name", "measured", "bound", "bound_expr", "pass")
    write_table(out, "verify", cols, [tuple(c[k] for k in cols) for c in checks], cfg.format)
    return checks


RUNNERS = {
    "simulate": run_simulate,
    "normal-form": run_normal_form,
    "measure": run_measure,
    "verify": run_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpnls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker cap for parallel sections")
        sp.add_argument("--format", choices=("csv", "json"), help="table format")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "format": args.format}
    try:
        if args.config is not None:
            cfg = load_config(args.config, overrides)
        else:
            cfg = parse_config(f"experiment: {args.command}\n", "<defaults>", overrides)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for '{cfg.experiment}', not '{args.command}'")
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.yaml").write_text(dump_resolved(cfg))
    try:
        checks = RUNNERS[cfg.experiment](cfg, out, args.workers)
    except BnfAborted as exc:
        _write_ledger(out, exc.ledger, cfg.format)
        write_summary(out, cfg, _ledger_checks(exc.ledger), "partial", str(exc))
        print(f"error: normal form aborted at {exc}", file=sys.stderr)
        return 2
    except (BnfError, NotCertified, ValueError, RuntimeError, KeyError) as exc:
        write_summary(out, cfg, [], "partial", f"{type(exc).__name__}: {exc}")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    doc = write_summary(out, cfg, checks)
    failed = [c["name"] for c in checks if c["pass"] is False]
    print(f"{cfg.experiment}: {len(checks) - len(failed)}/{len(checks)} checks without failure -> {out}")
    for name in failed:
        print(f"  FAIL {name}")
    return 0 if doc["all_pass"] else 1


if __name__ == "__main__":
    raise SystemExit(main())
