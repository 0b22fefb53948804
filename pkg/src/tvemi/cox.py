"""Cox regression with time-varying effects, fitted by Newton-Raphson.

The basis of each covariate's effect is evaluated at every failure time
inside the risk-set sums, so no episode splitting is needed. Ties use the
Breslow approximation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .basis import TveSpec, basis_matrix, block_slices, ph_contrast
from .data import SurvivalDataset, failure_times
from .errors import (
    ConvergenceError,
    DataError,
    MonotoneLikelihoodError,
    NumericalError,
    SingularInformationError,
)

log = logging.getLogger(__name__)

MAX_ITER = 100
MAX_HALVINGS = 20
SCORE_TOL = 1e-8
LOGLIK_TOL = 1e-10
COEF_BOUND = 50.0
RCOND_MIN = 1e-12
# elements per (failure time x subject) block in the risk-set sums
_BLOCK_ELEMS = 2_000_000


class RiskSets:
    """Failure-time structure of (time, event); reusable across covariate matrices."""

    def __init__(self, time, event):
        time = np.asarray(time, dtype=float)
        event = np.asarray(event)
        self.order = np.argsort(time, kind="stable")
        self.time_sorted = time[self.order]
        self.event_sorted = event[self.order]
        self.times, self.d = failure_times(time, event)
        self.d = self.d.astype(float)
        self.start = np.searchsorted(self.time_sorted, self.times, side="left")
        # index of the failure time for each event subject (sorted order)
        ev = np.flatnonzero(self.event_sorted == 1)
        self.event_rows = ev
        self.event_slot = np.searchsorted(self.times, self.time_sorted[ev])
        self.n = time.size

    def bases(self, specs):
        return [basis_matrix(s, self.times) for s in specs]


class _Design:
    """Covariates arranged for risk-set sums.

    When the matrix has few distinct rows (binary covariates), subjects are
    collapsed onto those rows and the risk sets become at-risk counts per
    pattern; otherwise the sums run over subjects in blocks of failure times.
    """

    def __init__(self, rs: RiskSets, xs):
        self.rs = rs
        self.xs = xs
        n, p = xs.shape
        self.p = p
        xev = np.zeros((rs.times.size, p))
        np.add.at(xev, rs.event_slot, xs[rs.event_rows])
        self.xev = xev
        uniq, inverse = np.unique(xs, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.patterns = uniq.shape[0] <= max(8, n // 50)
        if self.patterns:
            onehot = np.zeros((n + 1, uniq.shape[0]))
            onehot[np.arange(n), inverse] = 1.0
            at_risk = np.cumsum(onehot[::-1], axis=0)[::-1]
            self.rows = uniq
            self.counts = at_risk[rs.start]

    def blocks(self):
        rs = self.rs
        K = rs.times.size
        if self.patterns:
            yield 0, K, self.rows, self.counts
            return
        n = self.xs.shape[0]
        step = max(1, _BLOCK_ELEMS // max(n, 1))
        for j0 in range(0, K, step):
            j1 = min(j0 + step, K)
            c0 = rs.start[j0]
            risk = (np.arange(c0, n)[None, :] >= rs.start[j0:j1, None]).astype(float)
            yield j0, j1, self.xs[c0:], risk


def _sums(beta, specs, bases, design: _Design, need_info=True):
    """Log partial likelihood, score and information at ``beta``."""
    rs = design.rs
    p = design.p
    K = rs.times.size
    slices = block_slices(specs)
    F = np.column_stack([B @ beta[sl] for B, sl in zip(bases, slices)]) if p else np.zeros((K, 0))
    xev = design.xev
    ll = float(np.sum(F * xev))
    M = np.empty((K, p))
    V = np.empty((K, p, p)) if need_info else None
    for j0, j1, rows, weight in design.blocks():
        lp = F[j0:j1] @ rows.T
        m = np.where(weight > 0, lp, -np.inf).max(axis=1)
        w = weight * np.exp(lp - m[:, None])
        s0 = w.sum(axis=1)
        s1 = w @ rows
        ll -= float(np.sum(rs.d[j0:j1] * (np.log(s0) + m)))
        mean = s1 / s0[:, None]
        M[j0:j1] = mean
        if need_info:
            xx = (rows[:, :, None] * rows[:, None, :]).reshape(rows.shape[0], p * p)
            s2 = (w @ xx).reshape(j1 - j0, p, p)
            V[j0:j1] = s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]
    resid = xev - rs.d[:, None] * M
    score = np.concatenate([B.T @ resid[:, k] for k, B in enumerate(bases)]) if p else np.zeros(0)
    if not need_info:
        return ll, score, None
    q = score.size
    info = np.zeros((q, q))
    for k, (Bk, sk) in enumerate(zip(bases, slices)):
        for l, (Bl, sl) in enumerate(zip(bases, slices)):
            if l < k:
                continue
            blk = (Bk * (rs.d * V[:, k, l])[:, None]).T @ Bl
            info[sk, sl] = blk
            if l != k:
                info[sl, sk] = blk.T
    return ll, score, info


def _scaled_solve(info, score):
    """Solve info @ x = score with diagonal scaling; raise if (near) singular."""
    diag = np.diag(info)
    if np.any(~np.isfinite(diag)) or np.any(diag <= 0):
        bad = np.flatnonzero(~(diag > 0)).tolist()
        raise SingularInformationError("information matrix has non-positive diagonal", columns=bad)
    s = 1.0 / np.sqrt(diag)
    scaled = info * s[:, None] * s[None, :]
    rcond = 1.0 / np.linalg.cond(scaled)
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularInformationError(f"information ill-conditioned (rcond={rcond:.3g})", rcond=rcond)
    return s * np.linalg.solve(scaled, s * score), scaled, s


@dataclass(frozen=True, eq=False)
class CoxTveModel:
    names: tuple[str, ...]
    specs: tuple[TveSpec, ...]
    coefficients: np.ndarray
    covariance: np.ndarray
    log_partial_likelihood: float
    n_iter: int = 0
    max_score: float = 0.0
    max_followup: float = np.inf
    n_events: int = 0

    @property
    def block_index(self) -> dict[str, slice]:
        return dict(zip(self.names, block_slices(self.specs)))

    @property
    def coef_names(self) -> list[str]:
        return [c for name, s in zip(self.names, self.specs) for c in s.coef_names(name)]

    @property
    def knots(self) -> dict[str, tuple[float, ...]]:
        return {n: s.knots for n, s in zip(self.names, self.specs)}

    def _key(self, covariate) -> int:
        if isinstance(covariate, (int, np.integer)):
            return int(covariate)
        try:
            return self.names.index(covariate)
        except ValueError:
            raise KeyError(f"covariate {covariate!r} not in model") from None

    def block(self, covariate) -> slice:
        return block_slices(self.specs)[self._key(covariate)]

    def spec(self, covariate) -> TveSpec:
        return self.specs[self._key(covariate)]

    def to_text(self) -> str:
        """Flat ``key = value`` export; :func:`model_from_text` reads it back."""
        lines = [
            f"covariates = {','.join(self.names)}",
            f"log_partial_likelihood = {self.log_partial_likelihood!r}",
            f"n_events = {self.n_events}",
            f"max_followup = {self.max_followup!r}",
        ]
        lines += [f"spec.{n} = {s.to_string()}" for n, s in zip(self.names, self.specs)]
        lines += [f"coef.{c} = {v!r}" for c, v in zip(self.coef_names, self.coefficients.tolist())]
        q = self.coefficients.size
        lines += [f"cov.{i}.{j} = {float(self.covariance[i, j])!r}" for i in range(q) for j in range(i + 1)]
        return "\n".join(lines) + "\n"


def model_from_text(text: str) -> CoxTveModel:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    names = tuple(kv["covariates"].split(",")) if kv.get("covariates") else ()
    specs = tuple(TveSpec.from_string(kv[f"spec.{n}"]) for n in names)
    coef_names = [c for n, s in zip(names, specs) for c in s.coef_names(n)]
    beta = np.array([float(kv[f"coef.{c}"]) for c in coef_names])
    q = beta.size
    cov = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1):
            cov[i, j] = cov[j, i] = float(kv[f"cov.{i}.{j}"])
    return CoxTveModel(
        names, specs, beta, cov, float(kv["log_partial_likelihood"]),
        n_events=int(kv.get("n_events", 0)), max_followup=float(kv.get("max_followup", "inf")),
    )


def _resolve_specs(specs, names) -> tuple[TveSpec, ...]:
    if isinstance(specs, Mapping):
        return tuple(specs.get(n, TveSpec()) for n in names)
    specs = tuple(specs)
    if len(specs) != len(names):
        raise ValueError(f"{len(specs)} specs for {len(names)} covariates")
    return specs


def log_partial_likelihood(dataset: SurvivalDataset, specs, beta, completed_covariates=None):
    """Log partial likelihood and score at ``beta`` (for checks and diagnostics)."""
    specs = _resolve_specs(specs, dataset.names)
    x = dataset.covariates if completed_covariates is None else np.asarray(completed_covariates, float)
    rs = RiskSets(dataset.time, dataset.event)
    ll, score, _ = _sums(np.asarray(beta, float), specs, rs.bases(specs), _Design(rs, x[rs.order]), need_info=False)
    return ll, score


def fit(dataset: SurvivalDataset, specs, completed_covariates=None, *, risk_sets: RiskSets | None = None,
        max_iter: int = MAX_ITER, coef_bound: float = COEF_BOUND) -> CoxTveModel:
    """Maximum partial likelihood fit of the Cox model with the given effect forms.

    ``specs`` is a sequence aligned with the covariates or a mapping from
    covariate name to spec (absent names get a constant effect).
    """
    specs = _resolve_specs(specs, dataset.names)
    if completed_covariates is None:
        if dataset.has_missing():
            raise DataError("dataset has missing cells; pass completed covariates")
        x = dataset.covariates
    else:
        x = np.asarray(completed_covariates, dtype=float)
        if x.shape != dataset.covariates.shape or not np.all(np.isfinite(x)):
            raise DataError("completed covariates must be finite and match the dataset shape")
    if not np.any(dataset.event == 1):
        raise DataError("no events: partial likelihood undefined")
    rs = risk_sets or RiskSets(dataset.time, dataset.event)
    design = _Design(rs, x[rs.order])
    bases = rs.bases(specs)
    q = sum(s.dimension for s in specs)
    beta = np.zeros(q)
    ll, score, info = _sums(beta, specs, bases, design)
    ll_prev = None
    for it in range(1, max_iter + 1):
        step, _, _ = _scaled_solve(info, score)
        decrement = float(score @ step)
        done = np.max(np.abs(score), initial=0.0) < SCORE_TOL and (ll_prev is None or abs(ll - ll_prev) < LOGLIK_TOL)
        # at machine precision: the full Newton step can no longer change ll
        if done or (ll_prev is not None and 0 <= decrement < 1e-20 and abs(ll - ll_prev) < LOGLIK_TOL):
            # a flat likelihood that still asks for a full-size step is rising toward infinity
            big = np.abs(step) > 1e-2 * np.maximum(1.0, np.abs(beta))
            if it > 1 and np.any(big):
                j = int(np.flatnonzero(big)[0])
                raise MonotoneLikelihoodError(
                    f"coefficient {j} drifting without bound (monotone likelihood?)",
                    coefficient=j, value=float(beta[j]), step=float(step[j]), iteration=it,
                )
            break
        frac = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + frac * step
            ll_new, score_new, info_new = _sums(cand, specs, bases, design)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            frac *= 0.5
        else:
            raise ConvergenceError("step halving failed to increase the partial likelihood",
                                   iteration=it, loglik=ll)
        if np.max(np.abs(cand)) > coef_bound:
            j = int(np.argmax(np.abs(cand)))
            raise MonotoneLikelihoodError(
                f"coefficient {j} exceeded {coef_bound} in magnitude (monotone likelihood?)",
                coefficient=j, value=float(cand[j]), iteration=it,
            )
        ll_prev, ll = ll, ll_new
        beta, score, info = cand, score_new, info_new
    else:
        raise ConvergenceError(f"no convergence in {max_iter} iterations",
                               max_score=float(np.max(np.abs(score))), loglik=ll)
    _, scaled, s = _scaled_solve(info, score)
    cov = np.linalg.inv(scaled) * s[:, None] * s[None, :]
    cov = 0.5 * (cov + cov.T)
    return CoxTveModel(
        names=tuple(dataset.names), specs=specs, coefficients=beta, covariance=cov,
        log_partial_likelihood=ll, n_iter=it, max_score=float(np.max(np.abs(score), initial=0.0)),
        max_followup=float(dataset.time.max()), n_events=int(dataset.event.sum()),
    )


@dataclass(frozen=True, eq=False)
class TveCurve:
    times: np.ndarray
    estimate: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    se: np.ndarray
    outside_followup: np.ndarray = field(default=None)


def curve_from_block(spec: TveSpec, coef, cov, times, max_followup=np.inf) -> TveCurve:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    B = basis_matrix(spec, times)
    est = B @ np.asarray(coef, dtype=float)
    var = np.einsum("ta,ab,tb->t", B, np.asarray(cov, dtype=float), B)
    se = np.sqrt(np.clip(var, 0.0, None))
    outside = (times < 0) | (times > max_followup)
    if np.any(outside):
        log.warning("%d curve time(s) outside [0, %.3g]", int(outside.sum()), max_followup)
    return TveCurve(times, est, est - 1.96 * se, est + 1.96 * se, se, outside)


def tve_curve(model: CoxTveModel, covariate, times) -> TveCurve:
    """Estimated effect of ``covariate`` over ``times`` with pointwise 95% bounds."""
    sl = model.block(covariate)
    return curve_from_block(model.spec(covariate), model.coefficients[sl], model.covariance[sl, sl],
                            times, model.max_followup)


def default_grid(time, n_points: int = 100) -> np.ndarray:
    return np.linspace(0.0, float(np.percentile(time, 99)), n_points)


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    mode: str = "chisq"


def wald_chisq(theta, cov) -> WaldResult:
    """Quadratic-form test of theta = 0 against chi-square(len(theta))."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = theta.size
    if k == 0:
        raise ValueError("empty hypothesis")
    if np.all(theta == 0):
        return WaldResult(0.0, k, 1.0)
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SingularInformationError("covariance of tested parameters is singular") from None
    if np.min(np.diag(c)) ** 2 < 1e-14 * np.max(np.diag(cov)):
        raise SingularInformationError("covariance of tested parameters is near singular")
    z = np.linalg.solve(c, theta)
    stat = float(z @ z)
    return WaldResult(stat, k, float(stats.chi2.sf(stat, k)))


def ph_wald_test(model: CoxTveModel, covariate) -> WaldResult:
    """Joint Wald test that ``covariate``'s effect does not vary with time."""
    spec = model.spec(covariate)
    C = ph_contrast(spec)
    if C.shape[0] == 0:
        raise ValueError(f"covariate {covariate!r} has a constant effect; nothing to test")
    sl = model.block(covariate)
    return wald_chisq(C @ model.coefficients[sl], C @ model.covariance[sl, sl] @ C.T)


__all__ = [
    "CoxTveModel", "RiskSets", "TveCurve", "WaldResult", "fit", "tve_curve", "ph_wald_test",
    "wald_chisq", "log_partial_likelihood", "model_from_text", "curve_from_block", "default_grid",
    "NumericalError",
]
