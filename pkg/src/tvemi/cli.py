"""Command-line interface: ``tvemi <command> ...``.

Exit codes: 0 success, 1 usage or config schema, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, cox
from .approx import ApproxImputationConfig, impute_approx
from .basis import TveSpec, parse_tve_flag
from .config import ConfigError, load_config, parse_config
from .errors import DataError, NumericalError
from .io import export_csv, export_imputations, ingest_csv, ingest_imputations, write_rows
from .mi import ImputedDatasets, stream
from .pool import fit_pooled, mi_mtve_select, pooled_ph_test
from .sim import apply_missingness, run_replication_study, simulate_cohort

log = logging.getLogger("tvemi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, extra=None):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    body = {"tvemi_version": __version__, "command": args.command, "arguments": resolved}
    body.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True, default=str) + "\n")


def resolve_tve(flags, dataset, default="constant") -> list[TveSpec]:
    """Per-covariate specs from ``--tve`` values like ``x1=rcs5``, ``step:1,3`` or ``linear`` (all)."""
    names = dataset.names
    chosen = {n: default for n in names}
    for flag in flags or []:
        if "=" in flag:
            name, form = flag.split("=", 1)
            if name not in chosen:
                raise UsageError(f"--tve: unknown covariate {name!r} (have {', '.join(names)})")
            chosen[name] = form
        else:
            chosen = {n: flag for n in names}
    events = dataset.event_times()
    try:
        return [parse_tve_flag(chosen[n], events) for n in names]
    except ValueError as e:
        raise UsageError(f"--tve: {e}") from None


def _load_any(path):
    """A plain dataset (as a one-element list) or a long-format imputation file."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if "imp" in [h.strip() for h in header]:
        skeleton, xs = ingest_imputations(path)
        return ImputedDatasets(skeleton, xs, method="file")
    return ingest_csv(path)


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    cfg = load_config(args.config) if args.config else parse_config({})
    sc = cfg.scenario_config()
    if args.seed is not None:
        sc.base_seed = args.seed
    lam_e, lam_c = sc.resolved_rates()
    full = simulate_cohort(sc.scenario_id, sc.covariate_kind, sc.n_subjects, lam_e, lam_c, sc.admin_censor,
                           stream(sc.base_seed, 0, 0))
    masked = apply_missingness(full, sc.missingness, stream(sc.base_seed, 0, 1))
    out = _out_dir(args)
    export_csv(full, out / "complete.csv")
    export_csv(masked, out / "data.csv")
    _write_manifest(out, args, {"config": cfg.model_dump(), "lambda_E": lam_e, "lambda_C": lam_c,
                                "events": int(full.event.sum()),
                                "missing_any": float(masked.missing_mask.any(axis=1).mean())})
    print(f"wrote {out / 'data.csv'} ({full.n} subjects, {int(full.event.sum())} events)")
    return EXIT_OK


def _impute(args, dataset, specs):
    if args.m < 2:
        raise UsageError("--m must be at least 2 (pooling needs two or more imputations)")
    seed = args.seed if args.seed is not None else 1
    if args.method == "approx":
        cfg = ApproxImputationConfig(args.m, args.fcs_iterations, args.include_h1, args.include_interactions,
                                     specs, seed)
        return impute_approx(dataset, cfg)
    from .smc import SmcConfig, impute_smc

    return impute_smc(dataset, specs, None, SmcConfig(args.m, args.fcs_iterations, args.rejection_cap, True, seed))


def cmd_impute(args):
    ds = ingest_csv(args.data)
    specs = resolve_tve(args.tve, ds)
    imputed = _impute(args, ds, specs)
    out = _out_dir(args)
    export_imputations(imputed, out / "imputations.csv")
    _write_manifest(out, args, {"specs": {n: s.to_string() for n, s in zip(ds.names, specs)},
                                "diagnostics": imputed.diagnostics})
    print(f"wrote {imputed.m} imputations to {out / 'imputations.csv'}")
    return EXIT_OK


def _pooled_tables(pooled, specs, names, grid, out: Path):
    coef_names = [c for n, s in zip(names, specs) for c in s.coef_names(n)]
    se = np.sqrt(np.diag(pooled.total))
    write_rows(out / "coefficients.csv", ["term", "estimate", "se", "within_var", "between_var"],
               [[c, repr(float(q)), repr(float(s)), repr(float(w)), repr(float(b))]
                for c, q, s, w, b in zip(coef_names, pooled.qbar, se, np.diag(pooled.within), np.diag(pooled.between))])
    start = 0
    for n, s in zip(names, specs):
        sl = slice(start, start + s.dimension)
        start = sl.stop
        if s.form == "constant":
            continue
        curve = cox.curve_from_block(s, pooled.qbar[sl], pooled.total[sl, sl], grid)
        write_rows(out / f"curve_{n}.csv", ["t", "estimate", "lower95", "upper95", "se"],
                   [[f"{t:.6g}", repr(float(e)), repr(float(lo)), repr(float(hi)), repr(float(sd))]
                    for t, e, lo, hi, sd in zip(curve.times, curve.estimate, curve.lower95, curve.upper95, curve.se)])
    return coef_names, se


def cmd_fit(args):
    data = _load_any(args.data)
    source = data.source if isinstance(data, ImputedDatasets) else data
    specs = resolve_tve(args.tve, source)
    out = _out_dir(args)
    if isinstance(data, ImputedDatasets):
        pooled, fits = fit_pooled(data, specs)
    else:
        model = cox.fit(data, specs)
        (out / "model.txt").write_text(model.to_text())
        pooled, fits = fit_pooled([data], specs)
    grid = cox.default_grid(source.time)
    coef_names, se = _pooled_tables(pooled, specs, source.names, grid, out)
    _write_manifest(out, args, {"specs": {n: s.to_string() for n, s in zip(source.names, specs)}, "m": len(fits)})
    print(f"{'term':<14} {'estimate':>10} {'se':>10}")
    for c, q, s in zip(coef_names, pooled.qbar, se):
        print(f"{c:<14} {q:>10.4f} {s:>10.4f}")
    return EXIT_OK


def cmd_ph_test(args):
    data = _load_any(args.data)
    source = data.source if isinstance(data, ImputedDatasets) else data
    specs = resolve_tve(args.tve, source, default="rcs5")
    pooled, fits = fit_pooled(data if isinstance(data, ImputedDatasets) else [data], specs)
    rows = []
    for k, (n, s) in enumerate(zip(source.names, specs)):
        if s.form == "constant":
            continue
        res = pooled_ph_test(pooled, specs, k, args.wald)
        rows.append([n, s.label, f"{res.statistic:.6g}", res.df, f"{res.p_value:.6g}", res.mode,
                     "reject" if res.p_value < args.alpha else "retain"])
    header = ["covariate", "form", "statistic", "df", "p_value", "mode", f"decision_alpha_{args.alpha:g}"]
    print("  ".join(header))
    for r in rows:
        print("  ".join(str(c) for c in r))
    if args.out_dir:
        out = _out_dir(args)
        write_rows(out / "ph_test.csv", header, rows)
        _write_manifest(out, args, {"m": len(fits)})
    return EXIT_OK


def cmd_select(args):
    data = _load_any(args.data)
    if isinstance(data, ImputedDatasets):
        imputed = data
        if imputed.m < 2:
            raise UsageError("selection needs at least 2 imputations")
    else:
        specs = resolve_tve(["rcs5"], data)
        imputed = _impute(args, data, specs)
    trace = mi_mtve_select(imputed, alpha=args.alpha, mode=args.wald)
    out = _out_dir(args)
    (out / "selection.txt").write_text(trace.to_table())
    (out / "selection.csv").write_text(trace.to_csv())
    names = imputed.source.names
    specs = [trace.final_specs[n] for n in names]
    _pooled_tables(trace.final_pooled, specs, names, cox.default_grid(imputed.source.time), out)
    _write_manifest(out, args, {"final_specs": {n: s.to_string() for n, s in trace.final_specs.items()},
                                "selected": trace.selected, "m": imputed.m})
    print(trace.to_table(), end="")
    return EXIT_OK


def cmd_replicate(args):
    cfg = load_config(args.config)
    sc = cfg.scenario_config()
    if args.seed is not None:
        sc.base_seed = args.seed
    if args.m is not None:
        if args.m < 2:
            raise UsageError("--m must be at least 2")
        sc.m = args.m
    if args.wald:
        sc.wald = args.wald
    if args.alpha is not None:
        sc.alpha = args.alpha
    if args.reps is not None:
        sc.n_reps = args.reps

    def progress(done, total):
        log.info("rep %d/%d", done, total)

    report = run_replication_study(sc, progress)
    out = _out_dir(args)
    report.write(out)
    n_failed = sum(f["n_failed"] for f in report.failures.values())
    print(f"wrote summary.csv, curves.csv, manifest.json to {out} ({n_failed} failed method-reps)")
    return EXIT_OK if n_failed == 0 else EXIT_NUMERICAL


def cmd_report(args):
    path = Path(args.in_dir) / "summary.csv"
    if not path.exists():
        raise DataError(f"{path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    covs = list(dict.fromkeys(r["covariate"] for r in rows))
    times = sorted({r["t"] for r in rows if r["t"]}, key=float)

    def get(m, c, metric, t=""):
        for r in rows:
            if (r["method"], r["covariate"], r["metric"], r["t"]) == (m, c, metric, t):
                return r["value"]
        return "NA"

    def num(v, fmt):
        return "NA" if v == "NA" else format(float(v), fmt)

    print("PH rejection (%)")
    print(f"{'method':<15}" + "".join(f"{c:>9}" for c in covs))
    for m in methods:
        print(f"{m:<15}" + "".join(f"{num(get(m, c, 'rejection'), '.1f'):>9}" for c in covs))
    for c in covs:
        print(f"\nbias of {c} at t = {', '.join(times)}")
        for m in methods:
            print(f"{m:<15}" + "".join(f"{num(get(m, c, 'bias', t), '+.3f'):>9}" for t in times))
        print(f"coverage (%) of {c}")
        for m in methods:
            print(f"{m:<15}" + "".join(f"{num(get(m, c, 'coverage', t), '.1f'):>9}" for t in times))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tvemi", description="Cox regression with time-varying effects and multiple imputation.")
    p.add_argument("--version", action="version", version=f"tvemi {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", required=out_required, default=None)

    def imputation(sp, default_alpha):
        sp.add_argument("--method", choices=("approx", "smc"), default="approx")
        sp.add_argument("--m", type=int, default=10)
        sp.add_argument("--fcs-iterations", type=int, default=10)
        sp.add_argument("--rejection-cap", type=int, default=20000)
        sp.add_argument("--include-h1", action="store_true")
        sp.add_argument("--include-interactions", action="store_true")
        sp.add_argument("--alpha", type=float, default=default_alpha)

    tve_help = "effect form, e.g. x1=rcs5 or rcs3 for all (constant, linear, rcs3-5, rcs:<knots>, step:<cuts>)"

    s = sub.add_parser("simulate", help="generate one simulated cohort with missing data")
    s.add_argument("--config")
    common(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("impute", help="multiply impute missing covariates")
    s.add_argument("data")
    s.add_argument("--tve", action="append", help=tve_help)
    imputation(s, 0.05)
    common(s)
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("fit", help="fit the Cox model (pooled over imputations when given a long file)")
    s.add_argument("data")
    s.add_argument("--tve", action="append", help=tve_help)
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("ph-test", help="joint Wald tests of proportional hazards")
    s.add_argument("data")
    s.add_argument("--tve", action="append", help=tve_help + "; default rcs5")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--wald", choices=("chisq", "d1"), default="chisq")
    common(s, out_required=False)
    s.set_defaults(func=cmd_ph_test)

    s = sub.add_parser("select", help="impute with 5-knot splines and run forward TVE selection")
    s.add_argument("data")
    imputation(s, 0.01)
    s.add_argument("--wald", choices=("chisq", "d1"), default="chisq")
    common(s)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("replicate", help="run a Monte Carlo study from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--m", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--wald", choices=("chisq", "d1"))
    common(s)
    s.set_defaults(func=cmd_replicate)

    s = sub.add_parser("report", help="print tables from a replicate output directory")
    s.add_argument("in_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
