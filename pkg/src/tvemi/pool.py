"""Rubin's rules, pooled Wald tests and forward selection of time-varying effects."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import cox
from .basis import LINEAR, RCS, TveSpec, ph_contrast, select_knots
from .cox import WaldResult, wald_chisq
from .errors import NumericalError, SingularInformationError

log = logging.getLogger(__name__)

CHISQ = "chisq"
D1 = "d1"
DEFAULT_FORMS = ("linear", "rcs3", "rcs4", "rcs5")


@dataclass(frozen=True, eq=False)
class PooledEstimate:
    qbar: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    m: int

    def sub(self, index):
        """Pooled pieces restricted to ``index`` (a slice or integer array)."""
        ix = np.arange(self.qbar.size)[index]
        g = np.ix_(ix, ix)
        return PooledEstimate(self.qbar[ix], self.within[g], self.between[g], self.total[g], self.m)


def rubin_pool(estimates, covariances) -> PooledEstimate:
    Q = np.array([np.atleast_1d(np.asarray(e, dtype=float)) for e in estimates])
    if Q.shape[0] < 2:
        raise ValueError("Rubin's rules need at least 2 imputations")
    k = Q.shape[1]
    U = np.array([np.asarray(c, dtype=float).reshape(k, k) if np.size(c) == k * k else np.full((k, k), np.nan)
                  for c in covariances])
    if U.shape[0] != Q.shape[0] or np.isnan(U).any():
        raise ValueError("estimates and covariances disagree in number or dimension")
    m = Q.shape[0]
    qbar = Q.mean(axis=0)
    W = U.mean(axis=0)
    B = np.atleast_2d(np.cov(Q, rowvar=False, ddof=1)).reshape(k, k)
    T = W + (1.0 + 1.0 / m) * B
    return PooledEstimate(qbar, W, B, T, m)


def pooled_wald(pooled: PooledEstimate, index_set=None, mode: str = CHISQ, contrast=None) -> WaldResult:
    """Joint Wald test that the selected (or contrasted) coefficients are zero.

    ``chisq`` uses the total covariance with a chi-square reference; ``d1``
    uses the D1 statistic with an F reference and the Li-Raghunathan-Rubin
    denominator degrees of freedom.
    """
    est = pooled if index_set is None else pooled.sub(index_set)
    if contrast is not None:
        C = np.atleast_2d(np.asarray(contrast, dtype=float))
        est = PooledEstimate(C @ est.qbar, C @ est.within @ C.T, C @ est.between @ C.T, C @ est.total @ C.T, est.m)
    k = est.qbar.size
    if k == 0:
        raise ValueError("empty index set")
    if mode == CHISQ:
        return wald_chisq(est.qbar, est.total)
    if mode != D1:
        raise ValueError(f"unknown Wald mode {mode!r}")
    try:
        L = np.linalg.cholesky(est.within)
    except np.linalg.LinAlgError:
        raise SingularInformationError("within-imputation covariance not positive definite") from None
    winv_q = np.linalg.solve(L.T, np.linalg.solve(L, est.qbar))
    m = est.m
    r = (1.0 + 1.0 / m) * np.trace(np.linalg.solve(est.within, est.between)) / k
    stat = float(est.qbar @ winv_q) / (k * (1.0 + r))
    if stat == 0.0:
        return WaldResult(0.0, k, 1.0, mode=D1)
    t = k * (m - 1)
    if r <= 0:
        v = np.inf
    elif t > 4:
        v = 4 + (t - 4) * (1 + (1 - 2 / t) / r) ** 2
    else:
        v = t * (1 + 1 / k) * (1 + 1 / r) ** 2 / 2
    # F(k, v) tails lose accuracy for huge v; use the chi-square limit there
    p = float(stats.chi2.sf(stat * k, k)) if v > 1e7 else float(stats.f.sf(stat, k, v))
    return WaldResult(stat, k, p, mode=D1)


def fit_pooled(imputed, specs):
    """Fit the Cox model to every completed dataset and pool; returns (pooled, fits)."""
    fits = [cox.fit(ds, specs) for ds in imputed]
    if len(fits) == 1:
        f = fits[0]
        zero = np.zeros_like(f.covariance)
        return PooledEstimate(f.coefficients, f.covariance, zero, f.covariance, 1), fits
    return rubin_pool([f.coefficients for f in fits], [f.covariance for f in fits]), fits


def pooled_ph_test(pooled: PooledEstimate, specs: Sequence[TveSpec], covariate: int, mode: str = CHISQ) -> WaldResult:
    """Pooled test of no time variation in one covariate's effect."""
    spec = specs[covariate]
    C = ph_contrast(spec)
    if C.shape[0] == 0:
        raise ValueError("a constant effect has no time variation to test")
    start = sum(s.dimension for s in specs[:covariate])
    return pooled_wald(pooled, slice(start, start + spec.dimension), mode, contrast=C)


@dataclass
class SelectionStep:
    round: int
    covariate: str
    form: str
    p_value: float
    accepted: bool
    note: str = ""


@dataclass
class SelectionTrace:
    steps: list[SelectionStep]
    final_specs: dict[str, TveSpec]
    alpha: float
    final_pooled: PooledEstimate | None = None
    selected: list[tuple[str, str]] = field(default_factory=list)

    def to_table(self) -> str:
        head = f"{'round':>5}  {'covariate':<12} {'form':<7} {'p':>10}  decision"
        lines = [head, "-" * len(head)]
        for s in self.steps:
            decision = "adopt" if s.accepted else ("failed" if s.note else "-")
            lines.append(f"{s.round:>5}  {s.covariate:<12} {s.form:<7} {s.p_value:>10.4g}  {decision}")
        chosen = ", ".join(f"{c}:{f}" for c, f in self.selected) or "none"
        lines.append(f"selected TVEs (alpha={self.alpha:g}): {chosen}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["round", "covariate", "form", "p_value", "accepted", "note"])
        for s in self.steps:
            w.writerow([s.round, s.covariate, s.form, repr(float(s.p_value)), int(s.accepted), s.note])
        return buf.getvalue()


def form_spec(form: str, event_times) -> TveSpec:
    if form == LINEAR:
        return TveSpec.linear()
    if form.startswith(RCS):
        return TveSpec.rcs(select_knots(event_times, int(form[len(RCS):])))
    raise ValueError(f"unsupported selection form {form!r}")


def mi_mtve_select(imputed, covariates=None, alpha: float = 0.01, forms=DEFAULT_FORMS,
                   mode: str = CHISQ) -> SelectionTrace:
    """Forward selection of time-varying effects on multiply imputed data.

    Each round tries every remaining covariate with every form, tests the new
    effect's time variation on the pooled fit, and adopts the smallest p-value
    if it is below ``alpha``. Ties go to the smaller form, then to the
    earlier covariate.
    """
    source = imputed.source
    names = list(source.names)
    candidates = [source.column(c) for c in (covariates if covariates is not None else names)]
    event_times = source.event_times()
    form_specs = {f: form_spec(f, event_times) for f in forms}
    working = [TveSpec()] * len(names)
    steps: list[SelectionStep] = []
    selected = []
    rnd = 0
    while True:
        rnd += 1
        remaining = [c for c in candidates if working[c].form == "constant"]
        if not remaining:
            break
        results = []
        for c in remaining:
            for f in forms:
                trial = list(working)
                trial[c] = form_specs[f]
                note = ""
                try:
                    pooled, _ = fit_pooled(imputed, trial)
                    p = pooled_ph_test(pooled, trial, c, mode).p_value
                except (NumericalError, np.linalg.LinAlgError, ValueError) as e:
                    p, note = 1.0, f"fit failed: {e}"
                    log.warning("candidate %s:%s unusable: %s", names[c], f, e)
                results.append((p, form_specs[f].dimension, c, f, note))
        if all(r[4] for r in results):
            raise NumericalError("every selection candidate failed to fit", round=rnd,
                                 candidates=[(names[r[2]], r[3]) for r in results])
        best = min(results, key=lambda r: (r[0], r[1], candidates.index(r[2])))
        adopt = best[0] < alpha and not best[4]
        for r in results:
            steps.append(SelectionStep(rnd, names[r[2]], r[3], r[0], adopt and r is best, r[4]))
        if not adopt:
            break
        working[best[2]] = form_specs[best[3]]
        selected.append((names[best[2]], best[3]))
    final_pooled, _ = fit_pooled(imputed, working)
    return SelectionTrace(steps, dict(zip(names, working)), alpha, final_pooled, selected)
