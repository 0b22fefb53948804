"""Monte Carlo engine: data generation, missingness, replication and performance summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from . import cox
from .approx import ApproxImputationConfig, impute_approx
from .basis import TveSpec, select_knots
from .data import BINARY, CONTINUOUS, CovariateMeta, SurvivalDataset
from .errors import DataError, NumericalError
from .mi import stream
from .pool import fit_pooled, pooled_ph_test
from .regression import expit
from .smc import INCREMENT, SmcConfig, impute_smc

log = logging.getLogger(__name__)

SCENARIO_IDS = (1, 2, 3, 4, 5)
MECHANISMS = ("standard30", "outcome_dependent", "low10", "none")
METHODS = ("complete_data", "complete_case", "approx", "tve_approx", "smc", "tve_smc")
EFFECT_X2 = 0.5
PANEL = 0.005
NAMES = ("x1", "x2")


class CalibrationError(NumericalError):
    def __init__(self, message, trace=()):
        super().__init__(message, trace=list(trace))
        self.trace = list(trace)


def scenario_tve(scenario_id: int, t):
    """True log hazard ratio of X1 at time ``t`` under one of the five scenarios."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    if scenario_id == 1:
        out = np.full(t.shape, 0.5)
    elif scenario_id == 2:
        out = 0.1 + 0.2 * t
    elif scenario_id == 3:
        out = 0.1 + 0.8 * t ** 0.3
    elif scenario_id == 4:
        out = 0.32 + 1.42 * np.exp(-t) - 0.02 * t ** 0.7
    elif scenario_id == 5:
        out = 4.0 / (1.0 + np.exp(1.2 * (t + 0.5))) + 4.0 / (3.0 * (1.1 + np.exp(10.0 - t))) + 0.02
    else:
        raise ValueError(f"unknown scenario {scenario_id!r}; expected 1-5")
    return float(out) if out.ndim == 0 else out


def generate_covariates(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == BINARY:
        x1 = (rng.random(n) < 0.2).astype(float)
        x2 = (rng.random(n) < expit(x1)).astype(float)
        return np.column_stack([x1, x2])
    if kind == CONTINUOUS:
        z = rng.standard_normal((n, 2))
        return np.column_stack([z[:, 0], 0.5 * z[:, 0] + np.sqrt(0.75) * z[:, 1]])
    raise ValueError(f"unknown covariate kind {kind!r}")


def _intensity(scenario_id, x, u):
    """exp{f1(u) x1 + 0.5 x2} for rows of x (n, 2) at times u (g,); shape (n, g)."""
    return np.exp(np.outer(x[:, 0], scenario_tve(scenario_id, u)) + EFFECT_X2 * x[:, 1:2])


class _RateFree:
    """Rate-free cumulative hazard int_0^t exp{f1(u) x1 + 0.5 x2} du on a Simpson grid.

    Rows with identical covariates share one tabulation, which makes binary
    data cheap.
    """

    def __init__(self, scenario_id, x, horizon, panel=PANEL):
        self.sid = scenario_id
        self.horizon = float(horizon)
        k = int(np.ceil(self.horizon / panel))
        k += k % 2
        self.grid = np.linspace(0.0, self.horizon, k + 1)
        self.h = self.grid[1] - self.grid[0]
        x = np.asarray(x, dtype=float)
        uniq, inv = np.unique(x, axis=0, return_inverse=True)
        if uniq.shape[0] <= max(8, x.shape[0] // 50):
            self.rows, self.index = uniq, inv.reshape(-1)
        else:
            self.rows, self.index = x, np.arange(x.shape[0])
        self.x = x
        self._cum = None

    def _table(self, rows):
        vals = _intensity(self.sid, self.rows[rows], self.grid)
        return integrate.cumulative_simpson(vals, dx=self.h, axis=1, initial=0.0)

    def _partial(self, xr, a, t):
        # single Simpson panel from a to t, per subject
        m = 0.5 * (a + t)
        ga = _intensity_pts(self.sid, xr, a)
        gm = _intensity_pts(self.sid, xr, m)
        gt = _intensity_pts(self.sid, xr, t)
        return (t - a) / 6.0 * (ga + 4 * gm + gt)

    def at(self, t, chunk=2000):
        """Cumulative value for subject i at time t[i] (t clipped to [0, horizon])."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.horizon)
        out = np.empty(self.x.shape[0])
        j = np.minimum(((t / self.h).astype(int)), self.grid.size - 2)
        for c0 in range(0, self.x.shape[0], chunk):
            sl = slice(c0, c0 + chunk)
            rows = self.index[sl]
            if self.rows.shape[0] < self.x.shape[0]:
                table = self._shared_table()
                base = table[rows, j[sl]]
            else:
                table = self._table(rows)
                base = table[np.arange(rows.size), j[sl]]
            out[sl] = base + self._partial(self.x[sl], self.grid[j[sl]], t[sl])
        return out

    def _shared_table(self):
        if self._cum is None:
            self._cum = self._table(np.arange(self.rows.shape[0]))
        return self._cum

    def invert(self, target, chunk=2000):
        """Smallest t with cumulative(t) = target; inf when beyond the horizon."""
        target = np.asarray(target, dtype=float)
        n = self.x.shape[0]
        out = np.full(n, np.inf)
        for c0 in range(0, n, chunk):
            sl = slice(c0, c0 + chunk)
            rows = self.index[sl]
            if self.rows.shape[0] < n:
                table, r = self._shared_table(), rows
            else:
                table, r = self._table(rows), np.arange(rows.size)
            tg = target[sl]
            inside = tg <= table[r, -1]
            idx = np.flatnonzero(inside)
            if idx.size == 0:
                continue
            j = np.array([np.searchsorted(table[r[i]], tg[i], side="right") - 1 for i in idx])
            j = np.clip(j, 0, self.grid.size - 2)
            a = self.grid[j]
            b = self.grid[j + 1]
            base = table[r[idx], j]
            nxt = table[r[idx], j + 1]
            xr = self.x[sl][idx]
            lo, hi = a.copy(), b.copy()
            t = a + (b - a) * np.clip((tg[idx] - base) / np.maximum(nxt - base, 1e-300), 0, 1)
            for _ in range(50):
                g = self._partial(xr, a, t) + base - tg[idx]
                lo = np.where(g < 0, t, lo)
                hi = np.where(g >= 0, t, hi)
                step = g / _intensity_pts(self.sid, xr, t)
                t_new = t - step
                bad = (t_new <= lo) | (t_new >= hi)
                t_new = np.where(bad, 0.5 * (lo + hi), t_new)
                if np.max(np.abs(t_new - t)) < 1e-13:
                    t = t_new
                    break
                t = t_new
            res = out[sl]
            res[idx] = t
            out[sl] = res
        return out


def _intensity_pts(scenario_id, x, t):
    return np.exp(scenario_tve(scenario_id, np.asarray(t, dtype=float)) * x[:, 0] + EFFECT_X2 * x[:, 1])


def event_times(x, scenario_id, lambda_E, horizon, rng, panel=PANEL):
    """Vectorized inversion of the cumulative hazard; inf for no event by ``horizon``."""
    if lambda_E <= 0:
        raise ValueError("lambda_E must be > 0")
    u = rng.random(np.shape(x)[0])
    return _RateFree(scenario_id, x, horizon, panel).invert(-np.log(u) / lambda_E)


def generate_event_time(x1, x2, scenario, lambda_E, horizon, rng) -> float:
    """One event time; any value above ``horizon`` (here inf) means no event before it."""
    return float(event_times(np.array([[x1, x2]], dtype=float), scenario, lambda_E, horizon, rng)[0])


def _fractions(lam_e, lam_c, rf, E, V, horizon):
    c = np.minimum(V / lam_c, horizon)
    ev = lam_e * rf.at(c) >= E
    drop = ~ev & (V / lam_c < horizon)
    return float(ev.mean()), float(drop.mean())


PILOT_N = 200_000


def calibrate_rates(scenario, kind, target_event_frac=0.10, target_dropout_frac=0.50, rng=None,
                    n=PILOT_N, horizon=10.0, tol=0.005, max_rounds=100):
    """Event and dropout rates that hit the target fractions in a pilot cohort.

    Each half-step solves one rate exactly on the pilot draws (the empirical
    fraction is a step function of the rate, so the root is an order
    statistic); the two solves alternate until the rates settle.
    """
    if not (0 < target_event_frac < 1 and 0 < target_dropout_frac < 1
            and target_event_frac + target_dropout_frac < 1):
        raise CalibrationError(f"unreachable targets event={target_event_frac}, dropout={target_dropout_frac}")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = generate_covariates(kind, n, rng)
    E = rng.exponential(size=n)
    V = rng.exponential(size=n)
    rf = _RateFree(scenario, x, horizon)
    lam_c = np.log(2.0) / horizon
    lam_e = None
    trace = []
    for rnd in range(max_rounds):
        c = np.minimum(V / lam_c, horizon)
        # event iff lam_e >= E / Lambda(c)
        lam_e_new = float(np.quantile(E / rf.at(c), target_event_frac, method="inverted_cdf"))
        te = np.minimum(rf.invert(E / lam_e_new), horizon)
        # dropout iff V / lam_c < min(T_E, horizon), i.e. lam_c > V / min(T_E, horizon)
        lam_c_new = float(np.quantile(V / te, target_dropout_frac, method="inverted_cdf")) * (1 + 1e-12)
        ev, dr = _fractions(lam_e_new, lam_c_new, rf, E, V, horizon)
        trace.append({"round": rnd, "lambda_E": lam_e_new, "lambda_C": lam_c_new, "event": ev, "dropout": dr})
        settled = lam_e is not None and abs(lam_e_new - lam_e) < 1e-9 * lam_e and abs(lam_c_new - lam_c) < 1e-9 * lam_c
        lam_e, lam_c = lam_e_new, lam_c_new
        if settled or (abs(ev - target_event_frac) < 1e-3 and abs(dr - target_dropout_frac) < 1e-3):
            break
    ev, dr = trace[-1]["event"], trace[-1]["dropout"]
    if abs(ev - target_event_frac) > tol or abs(dr - target_dropout_frac) > tol:
        raise CalibrationError("calibration did not reach the targets", trace)
    return lam_e, lam_c


def simulate_cohort(scenario_id, kind, n, lambda_E, lambda_C, horizon, rng):
    """Covariates, follow-up times and event indicators for one cohort."""
    x = generate_covariates(kind, n, rng)
    te = event_times(x, scenario_id, lambda_E, horizon, rng)
    tc = rng.exponential(1.0 / lambda_C, size=n)
    t = np.minimum(np.minimum(te, tc), horizon)
    d = (te <= tc) & (te <= horizon)
    return SurvivalDataset(t, d.astype(int), x, None, (CovariateMeta("x1", kind), CovariateMeta("x2", kind)))


def apply_missingness(dataset: SurvivalDataset, mechanism: str, rng: np.random.Generator) -> SurvivalDataset:
    """Mask covariate cells under one of the MAR mechanisms (subjects split into random thirds)."""
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown missingness mechanism {mechanism!r}")
    n = dataset.n
    mask = np.zeros((n, 2), dtype=bool)
    if mechanism == "none":
        return dataset.with_covariates(dataset.covariates, mask)
    group = np.empty(n, dtype=int)
    group[rng.permutation(n)] = np.arange(n) % 3
    x1, x2 = dataset.covariates[:, 0], dataset.covariates[:, 1]
    d = dataset.event.astype(float)
    if mechanism == "standard30":
        p1, p2, p3 = expit(0.4 + 0.5 * x2), expit(0.4 + 0.5 * x1), np.full(n, 0.3)
    elif mechanism == "low10":
        p1, p2, p3 = expit(-1.2 + 0.5 * x2), expit(-1.2 + 0.5 * x1), np.full(n, 0.1)
    else:
        p1 = expit(-0.4 + 0.5 * x2 + 0.5 * d + 0.5 * x2 * d)
        p2 = expit(-0.4 + 0.5 * x1 + 0.5 * d + 0.5 * x1 * d)
        p3 = expit(-0.4 + 0.5 * d)
    u = rng.random(n)
    mask[:, 0] = ((group == 0) & (u < p1)) | ((group == 2) & (u < p3))
    mask[:, 1] = ((group == 1) & (u < p2)) | ((group == 2) & (u < p3))
    return dataset.with_covariates(dataset.covariates, mask)


# ---------------------------------------------------------------- calibration cache

_CACHE = Path(__file__).with_name("calibration.json")


def _cache_key(scenario, kind, ev, dr, horizon):
    return f"s{scenario}-{kind}-e{ev:g}-d{dr:g}-h{horizon:g}"


def cached_rates(scenario, kind, event_frac=0.10, dropout_frac=0.50, horizon=10.0, path=None, seed=0):
    """Rates from the calibration file, calibrating and storing them when absent."""
    path = Path(path) if path else _CACHE
    table = json.loads(path.read_text()) if path.exists() else {}
    key = _cache_key(scenario, kind, event_frac, dropout_frac, horizon)
    if key not in table:
        le, lc = calibrate_rates(scenario, kind, event_frac, dropout_frac, np.random.default_rng(seed),
                                 horizon=horizon)
        table[key] = {"lambda_E": le, "lambda_C": lc, "seed": seed, "pilot_n": PILOT_N}
        try:
            path.write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        except OSError as e:
            log.warning("could not store calibration in %s: %s", path, e)
    return table[key]["lambda_E"], table[key]["lambda_C"]


# ---------------------------------------------------------------- replication


@dataclass
class ScenarioConfig:
    scenario_id: int = 1
    covariate_kind: str = BINARY
    n_subjects: int = 2000
    lambda_E: float | None = None
    lambda_C: float | None = None
    admin_censor: float = 10.0
    missingness: str = "standard30"
    n_reps: int = 500
    m: int = 10
    methods: tuple = METHODS
    base_seed: int = 1
    event_frac: float = 0.10
    dropout_frac: float = 0.50
    fcs_iterations: int = 10
    rejection_cap: int = 20000
    smc_event_hazard: str = INCREMENT
    include_h1: bool = False
    include_interactions: bool = False
    alpha: float = 0.05
    wald: str = "chisq"
    eval_times: tuple = (1.0, 5.0, 9.0)
    curve_step: float = 0.1
    n_knots: int = 5
    workers: int | None = None
    calibration_file: str | None = None

    def __post_init__(self):
        if self.scenario_id not in SCENARIO_IDS:
            raise ValueError(f"scenario_id must be one of {SCENARIO_IDS}")
        if self.covariate_kind not in (BINARY, CONTINUOUS):
            raise ValueError("covariate_kind must be binary or continuous")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if self.admin_censor <= 0:
            raise ValueError("admin_censor must be > 0")
        for r in (self.lambda_E, self.lambda_C):
            if r is not None and r <= 0:
                raise ValueError("rates must be > 0")
        if self.missingness not in MECHANISMS:
            raise ValueError(f"missingness must be one of {MECHANISMS}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        self.methods = tuple(m for m in METHODS if m in self.methods)
        self.eval_times = tuple(float(t) for t in self.eval_times)

    def resolved_rates(self):
        if self.lambda_E is not None and self.lambda_C is not None:
            return self.lambda_E, self.lambda_C
        return cached_rates(self.scenario_id, self.covariate_kind, self.event_frac, self.dropout_frac,
                            self.admin_censor, self.calibration_file)

    def curve_grid(self):
        k = int(round(self.admin_censor / self.curve_step))
        return np.linspace(0.0, self.admin_censor, k + 1)


def _method_seed(base_seed, rep, method):
    return int(np.random.SeedSequence([base_seed, rep, 100 + METHODS.index(method)]).generate_state(1)[0])


def _analyse(imputed_or_ds, specs, cfg: ScenarioConfig, grid):
    pooled, _ = fit_pooled(imputed_or_ds, specs)
    out = {}
    start = 0
    for k, name in enumerate(NAMES):
        sl = slice(start, start + specs[k].dimension)
        start = sl.stop
        times = np.concatenate([grid, cfg.eval_times])
        curve = cox.curve_from_block(specs[k], pooled.qbar[sl], pooled.total[sl, sl], times)
        p = pooled_ph_test(pooled, specs, k, cfg.wald).p_value
        out[name] = {"curve": curve.estimate[:grid.size], "est": curve.estimate[grid.size:],
                     "lower": curve.lower95[grid.size:], "upper": curve.upper95[grid.size:], "p": p}
    return out


class _Single:
    """Adapter so a single completed dataset pools like an imputation list."""

    def __init__(self, ds):
        self.source = ds
        self._ds = ds

    def __iter__(self):
        return iter([self._ds])


def run_replication(cfg: ScenarioConfig, rep: int, rates=None):
    """One simulated dataset analysed by every configured method.

    Returns a dict method -> result or ``{"error": message}``.
    """
    lam_e, lam_c = rates or cfg.resolved_rates()
    rng = stream(cfg.base_seed, rep, 0)
    full = simulate_cohort(cfg.scenario_id, cfg.covariate_kind, cfg.n_subjects, lam_e, lam_c, cfg.admin_censor, rng)
    masked = apply_missingness(full, cfg.missingness, stream(cfg.base_seed, rep, 1))
    grid = cfg.curve_grid()
    results = {"_meta": {"events": int(full.event.sum()), "missing_any": float(masked.missing_mask.any(axis=1).mean())}}
    try:
        knots = select_knots(full.event_times(), cfg.n_knots)
    except ValueError as e:
        return {**results, **{m: {"error": f"knots: {e}"} for m in cfg.methods}}
    tve = [TveSpec.rcs(knots)] * 2
    const = [TveSpec()] * 2
    for method in cfg.methods:
        seed = _method_seed(cfg.base_seed, rep, method)
        try:
            if method == "complete_data":
                res = _analyse(_Single(full), tve, cfg, grid)
            elif method == "complete_case":
                res = _analyse(_Single(masked.subset(masked.complete_rows())), tve, cfg, grid)
            elif method in ("approx", "tve_approx"):
                icfg = ApproxImputationConfig(cfg.m, cfg.fcs_iterations, cfg.include_h1, cfg.include_interactions,
                                              tve if method == "tve_approx" else const, seed)
                res = _analyse(impute_approx(masked, icfg), tve, cfg, grid)
            else:
                scfg = SmcConfig(cfg.m, cfg.fcs_iterations, cfg.rejection_cap, True, seed, cfg.smc_event_hazard)
                imp = impute_smc(masked, tve if method == "tve_smc" else const, None, scfg)
                res = _analyse(imp, tve, cfg, grid)
                res["_diag"] = {k: imp.diagnostics[k] for k in ("cap_hits", "event_cells", "clamped_event_cells")}
        except (NumericalError, DataError, ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            res = {"error": f"{type(e).__name__}: {e}"}
        results[method] = res
    return results


def _run_chunk(args):
    cfg, reps, rates = args
    return [(r, run_replication(cfg, r, rates)) for r in reps]


def worker_count(requested=None):
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("TVEMI_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            log.warning("ignoring non-integer TVEMI_THREADS=%r", cap)
    return max(1, n)


@dataclass
class PerformanceReport:
    config: dict
    rates: tuple
    summary: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def value(self, method, covariate, metric, t=None):
        for row in self.summary:
            if row["method"] == method and row["covariate"] == covariate and row["metric"] == metric \
                    and (t is None or row["t"] == t):
                return row["value"]
        raise KeyError((method, covariate, metric, t))

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "covariate", "metric", "t", "value", "mcse", "n_ok", "n_failed"])
        for r in self.summary:
            w.writerow([r["method"], r["covariate"], r["metric"], "" if r["t"] is None else f"{r['t']:g}",
                        _fmt(r["value"]), _fmt(r["mcse"]), r["n_ok"], r["n_failed"]])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "covariate", "t", "mean", "q025", "q500", "q975", "truth"])
        for r in self.curves:
            w.writerow([r["method"], r["covariate"], f"{r['t']:g}", *(_fmt(r[k]) for k in ("mean", "q025", "q500", "q975", "truth"))])
        return buf.getvalue()

    def manifest(self) -> dict:
        return {"config": self.config, "lambda_E": self.rates[0], "lambda_C": self.rates[1],
                "rep_seeds": "SeedSequence([base_seed, rep, stream])",
                "failures": self.failures, "diagnostics": self.diagnostics}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(self.summary_csv())
        (out / "curves.csv").write_text(self.curves_csv())
        (out / "manifest.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "NA"
    return f"{float(v):.10g}"


def _truth(cfg, name, t):
    return scenario_tve(cfg.scenario_id, t) if name == "x1" else np.full(np.shape(t), EFFECT_X2)


def summarize(cfg: ScenarioConfig, results: list, rates) -> PerformanceReport:
    """Fold per-rep results (ordered by rep index) into performance measures."""
    results = sorted(results, key=lambda r: r[0])
    report = PerformanceReport(_config_dict(cfg), tuple(rates))
    grid = cfg.curve_grid()
    ev_t = np.array(cfg.eval_times)
    ok = {m: [res[m] for _, res in results if "error" not in res[m]] for m in cfg.methods}
    report.failures = {m: {"n_failed": sum("error" in res[m] for _, res in results),
                           "errors": sorted({res[m]["error"] for _, res in results if "error" in res[m]})[:5]}
                       for m in cfg.methods}
    diag = {"cap_hits": 0, "event_cells": 0, "clamped_event_cells": 0}
    for m in ("smc", "tve_smc"):
        for r in ok.get(m, []):
            for k in diag:
                diag[k] += r["_diag"][k]
    diag["clamp_fraction"] = diag["clamped_event_cells"] / diag["event_cells"] if diag["event_cells"] else 0.0
    report.diagnostics = {"smc": diag,
                          "mean_events": float(np.mean([res["_meta"]["events"] for _, res in results])),
                          "mean_missing_any": float(np.mean([res["_meta"]["missing_any"] for _, res in results]))}
    ref = {}
    if "complete_data" in ok and ok["complete_data"]:
        for name in NAMES:
            ref[name] = np.mean([r[name]["est"] for r in ok["complete_data"]], axis=0)
    for m in cfg.methods:
        rows = ok[m]
        n_ok, n_fail = len(rows), report.failures[m]["n_failed"]

        def add(name, metric, t, value, mcse):
            report.summary.append({"method": m, "covariate": name, "metric": metric, "t": t,
                                   "value": value, "mcse": mcse, "n_ok": n_ok, "n_failed": n_fail})

        for name in NAMES:
            truth = _truth(cfg, name, ev_t)
            if n_ok == 0:
                add(name, "rejection", None, np.nan, np.nan)
                continue
            est = np.array([r[name]["est"] for r in rows])
            lo = np.array([r[name]["lower"] for r in rows])
            hi = np.array([r[name]["upper"] for r in rows])
            mean = est.mean(axis=0)
            sd = est.std(axis=0, ddof=1) if n_ok > 1 else np.zeros(ev_t.size)
            mcse = sd / np.sqrt(n_ok)
            base = truth if m == "complete_data" or name not in ref else ref[name]
            bias = mean - base
            cover = 100.0 * np.mean((lo <= truth) & (truth <= hi), axis=0)
            for i, t in enumerate(ev_t):
                add(name, "mean_estimate", t, mean[i], mcse[i])
                add(name, "bias", t, bias[i], mcse[i])
                add(name, "bias_lower95", t, bias[i] - 1.96 * mcse[i], None)
                add(name, "bias_upper95", t, bias[i] + 1.96 * mcse[i], None)
                add(name, "coverage", t, cover[i], np.sqrt(cover[i] * (100 - cover[i]) / n_ok))
            rej = 100.0 * np.mean([r[name]["p"] < cfg.alpha for r in rows])
            add(name, "rejection", None, rej, np.sqrt(rej * (100 - rej) / n_ok))
            curves = np.array([r[name]["curve"] for r in rows])
            q = np.quantile(curves, [0.025, 0.5, 0.975], axis=0)
            truth_grid = _truth(cfg, name, grid)
            for i, t in enumerate(grid):
                report.curves.append({"method": m, "covariate": name, "t": t, "mean": curves[:, i].mean(),
                                      "q025": q[0, i], "q500": q[1, i], "q975": q[2, i], "truth": truth_grid[i]})
    return report


def _config_dict(cfg):
    d = asdict(cfg)
    d["methods"] = list(cfg.methods)
    d["eval_times"] = list(cfg.eval_times)
    d.pop("workers", None)
    return d


def run_replication_study(cfg: ScenarioConfig, progress=None) -> PerformanceReport:
    """Run every rep (in parallel when workers allow) and summarize."""
    rates = cfg.resolved_rates()
    reps = list(range(cfg.n_reps))
    n_workers = min(worker_count(cfg.workers), len(reps))
    results = []
    if n_workers <= 1:
        for r in reps:
            results.append((r, run_replication(cfg, r, rates)))
            if progress:
                progress(r + 1, len(reps))
    else:
        chunks = [reps[i::n_workers * 4] for i in range(n_workers * 4)]
        with ProcessPoolExecutor(n_workers) as ex:
            for part in ex.map(_run_chunk, [(cfg, c, rates) for c in chunks if c]):
                results.extend(part)
                if progress:
                    progress(len(results), len(reps))
    return summarize(cfg, results, rates)
