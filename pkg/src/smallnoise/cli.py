"""
Command-line front end.

Usage::

    smallnoise converge config.json [--seed S] [--eps 0.4,0.2] [--paths M] [--out DIR]
    smallnoise feynman-kac --catalog ou --workers 8
    smallnoise catalog list

Each run writes into ``<out>/<study>-<problem>-<hash>/`` where the hash is taken over
the effective configuration. Reports (``report.json``, ``summary.json`` and CSV
tables) depend only on the configuration and seed; wall-clock data goes to
``metadata.json``. Exit codes: 0 all checks passed, 2 configuration error, 3
runtime error, 4 a check failed.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, catalog
from .coeff_expr import constant_value, parse
from .config import ProblemConfig, STUDIES, catalog_config, load_config
from .errors import ConfigurationError, SmallNoiseError
from .feynman_kac import CauchyProblem, epsilon_sweep, transport_problem
from .model import (GLOBAL_KINDS, REQUIRED_KINDS, ConditionKind, Constants, PointSampler,
                    certify, certify_constants, check_ellipticity, estimate_condition, truncate)
from .paths import DoublingRadius, InitialSampler, simulate_ensemble
from .stats import block_jackknife
from .zeroth_order import _csv_text, attach_moment_checks, convergence_study, dumps

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4
OUT_ENV = "SMALLNOISE_OUT"
DEFAULT_OUT = "smallnoise-runs"


class Run:
    """Output directory and check ledger of one study."""

    def __init__(self, study: str, cfg: ProblemConfig, out_root: Path):
        self.study = study
        self.cfg = cfg
        self.dir = out_root / f"{study}-{cfg.name}-{cfg.digest()[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.checks: dict[str, bool | None] = {}
        self.files: list[str] = []

    def write(self, name: str, text: str):
        (self.dir / name).write_text(text)
        self.files.append(name)

    def check(self, name: str, ok):
        self.checks[name] = None if ok is None else bool(ok)

    @property
    def passed(self) -> bool:
        return all(v is not False for v in self.checks.values())


def _study_field(cfg: ProblemConfig, study: str):
    field = cfg.field
    trunc = cfg["truncation"]
    if trunc["policy"] == "fixed":
        return truncate(field, trunc["N"])
    if trunc["policy"] == "doubling" and study != "simulate":
        raise ConfigurationError("the doubling policy applies to the simulate study only",
                                 [("/truncation/policy", "doubling is only supported by simulate")])
    return field


def _deterministic_x0(cfg: ProblemConfig):
    x0 = cfg.x0
    return None if isinstance(x0, InitialSampler) else x0


# -- studies -------------------------------------------------------------------------

def _simulate(run: Run, workers: int) -> dict:
    cfg = run.cfg
    field = cfg.field
    grid, x0 = cfg.grid, cfg.x0
    trunc = cfg["truncation"]
    entry = cfg.entry
    results = []

    def terminal(values, times, blow):
        return {"terminal": values[:, -1]}

    for i, eps in enumerate(cfg["eps_grid"]):
        history = []
        if trunc["policy"] == "doubling":
            policy = DoublingRadius(trunc["N"], trunc["cap_factor"])
            N = policy.N0
            while True:
                ens = simulate_ensemble(field, x0, grid, eps, cfg["M"], cfg["seed"], cfg["scheme"],
                                        radius=N, reducer=terminal, moments=True, workers=workers)
                history.append({"N": N, "escapes": ens.escape_count})
                if ens.escape_count == 0 or 2 * N > policy.cap:
                    break
                N *= 2
        else:
            radius = trunc["N"] if trunc["policy"] == "fixed" else None
            ens = simulate_ensemble(field, x0, grid, eps, cfg["M"], cfg["seed"], cfg["scheme"],
                                    radius=radius, reducer=terminal, moments=True, workers=workers)
            if radius is not None:
                history.append({"N": radius, "escapes": ens.escape_count})
        run.write(f"summary_eps{i}.csv", _summary_csv(ens))
        ok = ~ens.blew_up
        term = ens.stats["terminal"][ok]
        mean, mse = block_jackknife(term) if term.size else (np.nan, np.nan)
        sq, sq_se = block_jackknife(term * term) if term.size else (np.nan, np.nan)
        item = {"eps": eps, "blowups": ens.blowup_count, "blowup_fraction": ens.blowup_fraction,
                "terminal_mean": mean, "terminal_mean_se": mse, "terminal_second_moment": sq,
                "terminal_second_moment_se": sq_se, "radius_history": history}
        run.check(f"blowup_fraction_eps{i}", ens.blowup_fraction <= 0.01)
        x_det = _deterministic_x0(cfg)
        if entry is not None and "mean" in entry.oracles and x_det is not None and trunc["policy"] == "none":
            T = grid.T
            m_or = np.asarray(entry.oracles["mean"](T, x_det, eps), float)
            cov = np.asarray(entry.oracles["covariance"](T, x_det, eps), float)
            s_or = m_or * m_or + np.diag(cov)
            tol = 5 * grid.h
            item["oracle_mean"], item["oracle_second_moment"] = m_or, s_or
            run.check(f"oracle_mean_eps{i}", np.all(np.abs(mean - m_or) <= 3 * mse + tol))
            run.check(f"oracle_second_moment_eps{i}", np.all(np.abs(sq - s_or) <= 3 * sq_se + tol))
        results.append(item)
        dump = cfg["simulate"]["dump_paths"]
        if dump:
            radius = None if trunc["policy"] == "none" else history[-1]["N"]
            small = simulate_ensemble(field, x0, grid, eps, min(dump, cfg["M"]), cfg["seed"],
                                      cfg["scheme"], radius=radius, store_paths=True)
            small.write_path_csvs(run.dir / f"paths_eps{i}")
    return {"ensembles": results}


def _summary_csv(ens) -> str:
    r = ens.moment_sum.shape[1]
    header = (["t"] + [f"mean_x{i + 1}" for i in range(r)]
              + [f"second_moment_x{i + 1}" for i in range(r)])
    return _csv_text(header, ens.summary_rows())


def _validate(run: Run, workers: int) -> dict:
    cfg = run.cfg
    field = _study_field(cfg, "validate")
    v = cfg["validate"]
    sampler = PointSampler(v["radius"], cfg.grid.T, v["n_t"], v["n_x"], v["seed"])
    certs = [certify(field, k, sampler) for k in GLOBAL_KINDS + (ConditionKind.LOCAL_LIPSCHITZ,)]
    rows = [c.to_dict() for c in certs]
    k = v["ellipticity_k"]
    ell = (check_ellipticity(field, sampler, k) if k is not None
           else estimate_condition(field, ConditionKind.ELLIPTICITY, sampler))
    rows.append(dict(ell.to_dict(), extrapolation_violations=None))
    table = _csv_text(["kind", "value", "constant", "sample_count", "violation_count",
                       "extrapolation_violations", "certified", "worst_ratio"],
                      ([r["kind"], r["value"], r["constant"], r["sample_count"], r["violation_count"],
                        r["extrapolation_violations"], str(r["certified"]).lower(), r["worst_ratio"]]
                       for r in rows))
    run.write("conditions.csv", table)
    by_kind = {c.kind: c for c in certs}
    for kind in REQUIRED_KINDS[cfg.variant]:
        run.check(f"{kind.value}_certified", by_kind[kind].certified)
    if k is not None:
        run.check("ellipticity_certified", ell.certified)
    return {"conditions": rows, "radius": v["radius"], "variant": cfg.variant,
            "required": [k.value for k in REQUIRED_KINDS[cfg.variant]]}


def _constants(cfg: ProblemConfig, field) -> tuple[Constants, list]:
    user = cfg["problem"]["constants"]
    if user is not None:
        return Constants(user["K_T"], user["L_T"], False, ("user",)), []
    r = cfg["converge"]["validator_radius"]
    v = cfg["validate"]
    return certify_constants(field, cfg.variant, PointSampler(r, cfg.grid.T, v["n_t"], v["n_x"],
                                                              v["seed"]))


def _converge(run: Run, workers: int) -> dict:
    cfg = run.cfg
    field = _study_field(cfg, "converge")
    conv = cfg["converge"]
    constants, certs = _constants(cfg, field)
    rep = convergence_study(field, cfg.x0, cfg.grid, cfg["eps_grid"], cfg["M"], cfg["seed"],
                            conv["t_checks"], conv["delta_grid"], scheme=cfg["scheme"],
                            constants=constants, variant=cfg.variant, workers=workers)
    if constants.certified and conv["moment_eps"]:
        attach_moment_checks(rep, field, cfg.x0, cfg.grid, conv["moment_eps"], cfg["M"],
                             cfg["seed"], scheme=cfg["scheme"], workers=workers)
    entry = cfg.entry
    x_det = _deterministic_x0(cfg)
    if entry is not None and "mse" in entry.oracles and x_det is not None \
            and cfg["truncation"]["policy"] == "none":
        rep.oracle = np.array([[entry.oracles["mse"](t, x_det, e) for t in rep.t_checks]
                               for e in rep.eps])
    run.write("mse.csv", rep.to_csv())
    run.write("sup_deviation.csv", rep.sup.to_csv())
    if rep.moments:
        run.write("moments.csv", _csv_text(
            ["eps", "t", "lhs", "se", "bound", "passed"],
            ([m.eps, t, l, s, b, str(bool(p)).lower()] for m in rep.moments
             for t, l, s, b, p in zip(m.t, m.lhs, m.se, m.bound, m.passed_at))))
    fit = rep.fit_at(cfg.grid.T)
    lo, hi = conv["order_range"]
    run.check("order_in_range", fit is not None and lo <= fit.p <= hi)
    run.check("no_blowup", bool(np.all(rep.usable)))
    if constants.certified:
        run.check("mse_within_bound", bool(np.all(rep.status == "pass")))
        run.check("sup_within_bound", rep.sup.bound_passed)
        run.check("moment_bound", all(m.passed for m in rep.moments))
    else:
        run.check("mse_within_bound", None)
    run.check("sup_monotone", rep.sup.monotone_passed)
    within = rep.oracle_within()
    if within is not None:
        run.check("mse_matches_oracle", bool(np.all(within)))
    out = rep.to_dict()
    out["certificates"] = [c.to_dict() for c in certs]
    return out


def _sweeps(run: Run, problem: CauchyProblem, block: str, workers: int, oracle=None) -> list:
    cfg = run.cfg
    eps = list(cfg["eps_grid"]) + ([0.0] if cfg[block]["include_zero"] else [])
    out = []
    for i, p in enumerate(cfg[block]["points"]):
        t, x = float(p["t"]), np.asarray(p["x"], float)
        grid = cfg.grid_to(t)
        sw = epsilon_sweep(problem, (t, x), eps, cfg["M"], cfg["seed"], grid, workers=workers)
        run.write(f"sweep_point{i}.csv", sw.to_csv())
        run.write(f"sweep_point{i}.json", sw.to_json())
        run.check(f"estimates_valid_point{i}", sw.valid)
        run.check(f"gaps_monotone_point{i}", sw.monotone_passed)
        d = sw.to_dict()
        if oracle is not None:
            tol = [3 * r.se + 5 * grid.h for r in sw.rows]
            ref = [oracle(t, x, r.eps) for r in sw.rows]
            d["oracle"] = ref
            run.check(f"oracle_point{i}", all(abs(r.v_eps - o) <= tl
                                              for r, o, tl in zip(sw.rows, ref, tol)))
        out.append((sw, d))
    return out


def _scalar_oracle(cfg: ProblemConfig):
    entry = cfg.entry
    if entry is None or "v_eps" not in entry.oracles or cfg["truncation"]["policy"] != "none":
        return None
    s = cfg["scalar"]
    if any(s[k] != entry.scalar[k] for k in ("c", "g", "f")):
        return None
    return entry.oracles["v_eps"]


def _feynman_kac(run: Run, workers: int) -> dict:
    cfg = run.cfg
    field = _study_field(cfg, "feynman-kac")
    problem = CauchyProblem(field, cfg.scalar, cfg["feynman_kac"]["k"], cfg["scheme"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        elliptic = problem.check_ellipticity(cfg["validate"]["radius"], cfg["validate"]["seed"])
    sweeps = _sweeps(run, problem, "feynman_kac", workers, _scalar_oracle(cfg))
    return {"ellipticity_certified": elliptic, "warnings": [str(w.message) for w in caught],
            "points": [d for _, d in sweeps]}


def _transport(run: Run, workers: int) -> dict:
    cfg = run.cfg
    field = _study_field(cfg, "transport")
    s = cfg["scalar"]
    for key in ("c", "g"):
        if constant_value(parse(s[key], cfg.r)) != 0.0:
            raise ConfigurationError("transport requires c = 0 and g = 0",
                                     [(f"/scalar/{key}", "must be identically 0 for transport")])
    problem = transport_problem(field, cfg.scalar, scheme=cfg["scheme"])
    sweeps = _sweeps(run, problem, "transport", workers, _scalar_oracle(cfg))
    tol = cfg["transport"]["gap_tol"]
    for i, (sw, _) in enumerate(sweeps):
        last = [r for r in sw.rows if r.eps > 0][-1]
        run.check(f"gap_below_tol_point{i}", last.gap < tol)
    return {"gap_tol": tol, "points": [d for _, d in sweeps]}


STUDY_FUNCS = {
    "simulate": _simulate,
    "validate": _validate,
    "converge": _converge,
    "feynman-kac": _feynman_kac,
    "transport": _transport,
}


def run_study(study: str, cfg: ProblemConfig, out_root: Path, workers: int = 1) -> Run:
    """Execute ``study`` and write its reports; returns the :class:`Run` with check results."""
    if study not in STUDY_FUNCS:
        raise ConfigurationError(f"unknown study {study!r}", [("", f"unknown study {study!r}")])
    started = _dt.datetime.now(_dt.timezone.utc)
    run = Run(study, cfg, Path(out_root))
    results = STUDY_FUNCS[study](run, workers)
    report = {"study": study, "schema_version": cfg["schema_version"], "problem": cfg.name,
              "config": cfg.effective, "config_hash": cfg.digest(), "results": results,
              "checks": run.checks, "passed": run.passed}
    run.write("report.json", dumps(report))
    run.write("effective_config.json", cfg.to_json())
    summary = {"study": study, "problem": cfg.name, "config_hash": cfg.digest(),
               "checks": run.checks, "passed": run.passed,
               "exit_code": EXIT_OK if run.passed else EXIT_CHECK}
    run.write("summary.json", dumps(summary))
    meta = {"started": started.isoformat(),
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "workers": workers, "files": sorted(run.files)}
    (run.dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return run


# -- argument handling ---------------------------------------------------------------

def _eps_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smallnoise",
        description="Small-noise SDE studies: simulation, condition checks, zeroth-order "
                    "convergence, Feynman-Kac and transport sweeps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="study", required=True, metavar="STUDY")
    for name in STUDIES:
        p = sub.add_parser(name, help=f"run the {name} study")
        p.add_argument("config", nargs="?", help="JSON configuration file")
        p.add_argument("--catalog", help="use a catalog problem with default settings")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--eps", type=_eps_list, help="override eps_grid, e.g. 0.4,0.2,0.1")
        p.add_argument("--paths", type=_positive_int, help="override the path count M")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--workers", type=_positive_int, default=1,
                       help="worker threads; results do not depend on it")
    cat = sub.add_parser("catalog", help="catalog operations")
    cat_sub = cat.add_subparsers(dest="action", required=True)
    lst = cat_sub.add_parser("list", help="list catalog problems")
    lst.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def _catalog_list(as_json: bool) -> int:
    entries = [catalog.get(n) for n in catalog.names()]
    if as_json:
        print(json.dumps([e.to_dict() for e in entries], indent=2, sort_keys=True))
    else:
        for e in entries:
            print(f"{e.name:15s} r={e.r} l={e.l} {e.variant:11s} {e.description}")
    return EXIT_OK


def _load(args) -> ProblemConfig:
    overrides = {"seed": args.seed, "eps": args.eps, "paths": args.paths}
    if args.config and args.catalog:
        raise ConfigurationError("give either a config file or --catalog, not both")
    if args.config:
        return load_config(args.config, **overrides)
    if args.catalog:
        return catalog_config(args.catalog, **overrides)
    raise ConfigurationError("a config file or --catalog is required")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.study == "catalog":
        return _catalog_list(args.json)
    try:
        cfg = _load(args)
        out_root = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
        run = run_study(args.study, cfg, out_root, args.workers)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        if "\n" not in str(e):
            for pointer, msg in e.errors:
                print(f"  {pointer or '/'}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (SmallNoiseError, ArithmeticError, ValueError) as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, ok in run.checks.items():
        state = "skip" if ok is None else ("pass" if ok else "FAIL")
        print(f"{state:4s} {name}")
    print(f"report: {run.dir}")
    return EXIT_OK if run.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
