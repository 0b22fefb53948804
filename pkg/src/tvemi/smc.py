"""Substantive-model-compatible imputation by rejection sampling.

Missing covariate values are proposed from a covariate model p(X_k | X_-k)
and accepted with probability proportional to the Cox model likelihood of the
subject's outcome. Effects may vary with time, so the linear predictor is
evaluated at every failure time inside the cumulative hazard sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Mapping

import numpy as np

from . import cox
from .basis import TveSpec, tve_matrix
from .data import BINARY, BaselineHazard, SurvivalDataset, breslow_baseline
from .errors import ImputationError, NumericalError
from .mi import ImputedDatasets, incomplete_columns, initial_fill, stream
from .regression import (_mvn_factor, expit, fit_logistic, posterior_draw_linear,
                         posterior_draw_logistic)

log = logging.getLogger(__name__)

LOGISTIC = "logistic"
LINEAR = "linear"

# hazard factor in the event branch of the acceptance rule
INCREMENT = "increment"
CUMULATIVE = "cumulative"

_CELL_CHUNK = 4096
_MAX_BATCH = 256


@dataclass
class CovariateModel:
    """Regression of one covariate on the others (with intercept)."""

    target: str
    kind: str
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual_variance: float = 0.0

    def __post_init__(self):
        if self.kind not in (LOGISTIC, LINEAR):
            raise ValueError(f"covariate model kind must be logistic or linear, got {self.kind!r}")

    def check(self, n_other: int):
        if self.coefficients.size != 1 + n_other:
            raise ValueError(f"{self.target}: expected {1 + n_other} coefficients, got {self.coefficients.size}")

    def propose(self, design, size, rng):
        """``size`` proposals per row of ``design``; shape (rows, size)."""
        eta = design @ self.coefficients
        if self.kind == LOGISTIC:
            return (rng.random((eta.size, size)) < expit(eta)[:, None]).astype(float)
        return eta[:, None] + np.sqrt(self.residual_variance) * rng.standard_normal((eta.size, size))


@dataclass
class SmcConfig:
    m: int = 10
    fcs_iterations: int = 10
    rejection_cap: int = 20000
    draw_coefficients: bool = True
    rng_seed: int = 0
    event_hazard: str = INCREMENT

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.rejection_cap < 1:
            raise ValueError("rejection_cap must be >= 1")
        if self.fcs_iterations < 1:
            raise ValueError("fcs_iterations must be >= 1")
        if self.event_hazard not in (INCREMENT, CUMULATIVE):
            raise ValueError(f"event_hazard must be {INCREMENT!r} or {CUMULATIVE!r}")


def draw_substantive_params(model, rng: np.random.Generator) -> np.ndarray:
    beta = np.asarray(model.coefficients, dtype=float)
    cov = np.asarray(model.covariance, dtype=float)
    if cov.shape != (beta.size, beta.size):
        raise ValueError(f"covariance shape {cov.shape} does not match {beta.size} coefficients")
    return beta + _mvn_factor(cov) @ rng.standard_normal(beta.size)


def acceptance_probability(record, candidate_x, other_x, specs, beta_draw, baseline: BaselineHazard,
                           target: int = 0, event_hazard: str = INCREMENT) -> float:
    """Probability of accepting ``candidate_x`` for covariate ``target`` of one subject.

    ``other_x`` holds the remaining covariates in their original order with
    the target removed.
    """
    T, D = float(record[0]), int(record[1])
    p = len(specs)
    x = np.insert(np.asarray(other_x, dtype=float), target, float(candidate_x)) if p > 1 else np.array([candidate_x], float)
    times = baseline.event_times
    upto = times <= T
    lp = tve_matrix(specs, beta_draw, times[upto]) @ x
    S = float(np.sum(baseline.increments[upto] * np.exp(lp)))
    if D == 0:
        expo = -S
        if not np.isfinite(expo):
            raise ImputationError("non-finite exponent in acceptance probability", T=T, D=D)
        return float(np.exp(expo))
    h, _ = _event_hazard(baseline, np.array([T]), event_hazard)
    lpT = float(tve_matrix(specs, beta_draw, [T])[0] @ x)
    expo = np.log(h[0]) + 1.0 + lpT - S if h[0] > 0 else -np.inf
    if np.isnan(expo) or expo == np.inf:
        raise ImputationError("non-finite exponent in acceptance probability", T=T, D=D)
    return float(min(1.0, np.exp(expo)))


def _event_hazard(baseline: BaselineHazard, T, mode):
    if mode == CUMULATIVE:
        return baseline.cumulative(T), np.zeros(T.shape, dtype=bool)
    return baseline.increment_at(T)


class _CellBatch:
    """Precomputed pieces of the acceptance rule for the missing cells of one covariate."""

    def __init__(self, T, D, xo, F, fT, b, baseline, mode, target):
        # F: effects at failure times (K, p); fT: effects at each cell's own time (cells, p)
        others = [j for j in range(F.shape[1]) if j != target]
        times = baseline.event_times
        O = F[:, others] @ xo.T if others else np.zeros((times.size, T.size))
        self.a = np.where(times[:, None] <= T[None, :], baseline.increments[:, None] * np.exp(O), 0.0)
        self.b = b
        self.D = D.astype(bool)
        h, self.fallback = _event_hazard(baseline, T, mode)
        self.fallback &= self.D
        oT = np.einsum("ij,ij->i", fT[:, others], xo) if others else np.zeros(T.size)
        with np.errstate(divide="ignore"):
            self.log_h = np.where(self.D, np.log(h) + 1.0 + oT, 0.0)
        self.bT = fT[:, target]

    def log_accept(self, cells, P):
        """Raw log acceptance (before clamping) for proposals P of shape (len(cells), B)."""
        a = self.a[:, cells]
        S = np.einsum("kc,kcb->cb", a, np.exp(self.b[:, None, None] * P[None, :, :]))
        out = np.where(self.D[cells, None], self.log_h[cells, None] + self.bT[cells, None] * P - S, -S)
        if np.any(np.isnan(out)) or np.any(out == np.inf):
            raise ImputationError("non-finite exponent in acceptance probability")
        return out

    def binary_log_accept(self):
        """Raw log acceptance at x* = 0 and x* = 1 for every cell."""
        S0 = self.a.sum(axis=0)
        S1 = np.exp(self.b) @ self.a
        l0 = np.where(self.D, self.log_h - S0, -S0)
        l1 = np.where(self.D, self.log_h + self.bT - S1, -S1)
        return l0, l1


def _rejection_sample(batch: _CellBatch, model: CovariateModel, Z, rng, cap, binary):
    """Accepted values for every cell plus (cap hits, clamped D=1 cells)."""
    n = Z.shape[0]
    out = np.empty(n)
    used = np.zeros(n, dtype=int)
    clamped = np.zeros(n, dtype=bool)
    pending = np.arange(n)
    if binary:
        l0, l1 = batch.binary_log_accept()
    size = 8
    cap_hits = 0
    while pending.size:
        B = min(size, cap - int(used[pending[0]]))
        P = model.propose(Z[pending], B, rng)
        U = rng.random(P.shape)
        if binary:
            raw = np.where(P == 1.0, l1[pending, None], l0[pending, None])
        else:
            raw = batch.log_accept(pending, P)
        clamped[pending] |= np.any(raw > 0, axis=1) & batch.D[pending]
        ok = np.log(U) < np.minimum(raw, 0.0)
        hit = ok.any(axis=1)
        first = np.argmax(ok, axis=1)
        done = pending[hit]
        out[done] = P[hit, first[hit]]
        used[pending] += B
        exhausted = ~hit & (used[pending] >= cap)
        out[pending[exhausted]] = P[exhausted, -1]
        cap_hits += int(exhausted.sum())
        pending = pending[~hit & ~exhausted]
        size = min(size * 2, _MAX_BATCH)
    return out, cap_hits, clamped


def _fit_covariate_model(kind, target, Z, y, rng, draw):
    if kind == LOGISTIC:
        if draw:
            coef = posterior_draw_logistic(Z, y, rng)
        else:
            coef, _ = fit_logistic(Z, y)
        return CovariateModel(target, kind, coef)
    if draw:
        coef, s2 = posterior_draw_linear(Z, y, rng)
    else:
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        r = y - Z @ coef
        s2 = float(r @ r) / (y.size - Z.shape[1])
    return CovariateModel(target, kind, coef, float(s2))


def _models_for(dataset, covariate_models):
    kinds = {}
    for k, name in enumerate(dataset.names):
        default = LOGISTIC if dataset.kinds[k] == BINARY else LINEAR
        given = (covariate_models or {}).get(name, default)
        kinds[k] = given.kind if isinstance(given, CovariateModel) else str(given)
        if kinds[k] not in (LOGISTIC, LINEAR):
            raise ValueError(f"{name}: covariate model must be logistic or linear")
    return kinds


def _impute_one(dataset, specs, kinds, config, rs, rng, m, diag):
    x = initial_fill(dataset)
    mask = dataset.missing_mask
    targets = incomplete_columns(dataset)
    T_all, D_all = dataset.time, dataset.event
    for it in range(config.fcs_iterations):
        try:
            model = cox.fit(dataset, specs, x, risk_sets=rs)
        except NumericalError as e:
            raise ImputationError(f"substantive model fit failed (imputation {m + 1}, iteration {it + 1}): {e}",
                                  imputation=m, iteration=it, **e.diagnostics) from e
        beta = draw_substantive_params(model, rng) if config.draw_coefficients else model.coefficients
        baseline = breslow_baseline(dataset, SimpleNamespace(specs=specs, coefficients=beta), x)
        F = tve_matrix(specs, beta, baseline.event_times)
        for k in targets:
            others = [j for j in range(dataset.p) if j != k]
            Z = np.column_stack([np.ones(dataset.n), x[:, others]])
            cm = _fit_covariate_model(kinds[k], dataset.names[k], Z, x[:, k], rng, config.draw_coefficients)
            rows = np.flatnonzero(mask[:, k])
            for c0 in range(0, rows.size, _CELL_CHUNK):
                r = rows[c0:c0 + _CELL_CHUNK]
                fT = tve_matrix(specs, beta, T_all[r])
                batch = _CellBatch(T_all[r], D_all[r], x[r][:, others], F, fT, F[:, k], baseline,
                                   config.event_hazard, k)
                vals, hits, clamped = _rejection_sample(batch, cm, Z[r], rng, config.rejection_cap,
                                                        kinds[k] == LOGISTIC)
                if not np.all(np.isfinite(vals)):
                    raise ImputationError(f"non-finite imputed value for {dataset.names[k]!r}",
                                          imputation=m, iteration=it)
                x[r, k] = vals
                diag["cap_hits"] += hits
                diag["event_cells"] += int(batch.D.sum())
                diag["clamped_event_cells"] += int(clamped.sum())
                diag["fallback_lookups"] += int(batch.fallback.sum())
    return x


def impute_smc(dataset: SurvivalDataset, specs, covariate_models: Mapping | None = None,
               config: SmcConfig | None = None) -> ImputedDatasets:
    """Multiple imputation compatible with a Cox model whose effects may vary over time.

    ``covariate_models`` maps covariate names to ``"logistic"`` or
    ``"linear"``; by default binary covariates get a logistic model.
    """
    config = config or SmcConfig()
    specs = cox._resolve_specs(specs, dataset.names)
    kinds = _models_for(dataset, covariate_models)
    for k in incomplete_columns(dataset):
        if dataset.missing_mask[:, k].all():
            raise ValueError(f"covariate {dataset.names[k]!r} is never observed")
    rs = cox.RiskSets(dataset.time, dataset.event)
    diag = {"cap_hits": 0, "event_cells": 0, "clamped_event_cells": 0, "fallback_lookups": 0,
            "fcs_iterations": config.fcs_iterations, "rejection_cap": config.rejection_cap}
    completed = []
    for m in range(config.m):
        rng = stream(config.rng_seed, m)
        if not dataset.has_missing():
            for it in range(config.fcs_iterations):
                cox.fit(dataset, specs, risk_sets=rs)
            completed.append(np.array(dataset.covariates))
            continue
        completed.append(_impute_one(dataset, specs, kinds, config, rs, rng, m, diag))
    diag["clamp_fraction"] = diag["clamped_event_cells"] / diag["event_cells"] if diag["event_cells"] else 0.0
    if diag["cap_hits"]:
        log.warning("rejection cap reached for %d cell draws; kept last proposal", diag["cap_hits"])
    return ImputedDatasets(dataset, completed, method="smc", seed=config.rng_seed, diagnostics=diag)
