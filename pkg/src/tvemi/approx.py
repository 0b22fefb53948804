"""Regression-based imputation with approximately compatible covariates.

The imputation model for a covariate X_k regresses it on the other
covariates, the event indicator times the basis of X_k's time-varying effect
evaluated at the subject's own time, and Nelson-Aalen type summaries of the
outcome. With a constant effect this is the classic model with D and H(T).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .basis import STEP, TveSpec, basis_matrix
from .data import BINARY, CumulativeHazardEstimate, SurvivalDataset, nelson_aalen
from .errors import ImputationError
from .mi import ImputedDatasets, incomplete_columns, initial_fill, stream
from .regression import drop_collinear, expit, posterior_draw_linear, posterior_draw_logistic

log = logging.getLogger(__name__)


@dataclass
class ApproxImputationConfig:
    m: int = 10
    fcs_iterations: int = 10
    include_h1: bool = False
    include_interactions: bool = False
    tve_specs: Mapping[str, TveSpec] | list | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least 2 imputations")
        if self.fcs_iterations < 1:
            raise ValueError("fcs_iterations must be >= 1")


def _specs_for(dataset: SurvivalDataset, specs) -> list[TveSpec]:
    if specs is None:
        return [TveSpec()] * dataset.p
    if isinstance(specs, Mapping):
        return [specs.get(n, TveSpec()) for n in dataset.names]
    specs = list(specs)
    if len(specs) != dataset.p:
        raise ValueError(f"{len(specs)} TVE specs for {dataset.p} covariates")
    return specs


@dataclass
class _Outcome:
    """Outcome-side imputation columns; fixed across imputations and iterations."""

    time: np.ndarray
    event: np.ndarray
    hazard: CumulativeHazardEstimate
    h: np.ndarray = field(init=False)
    h1: np.ndarray = field(init=False)

    def __post_init__(self):
        self.h = self.hazard.h(self.time)
        self.h1 = self.hazard.h1(self.time)


def _step_hazard_columns(outcome: _Outcome, cuts):
    """Per-interval hazard for completed periods before T, plus the partial period."""
    T = outcome.time
    cols, names = [], []
    lower = 0.0
    last_complete = np.zeros_like(T)
    for k, s in enumerate(cuts):
        complete = s <= T
        cols.append(np.where(complete, outcome.hazard.h(s) - outcome.hazard.h(lower), 0.0))
        names.append(f"H*{k + 1}")
        last_complete = np.where(complete, s, last_complete)
        lower = s
    cols.append(outcome.h - outcome.hazard.h(last_complete))
    names.append("H*T")
    return cols, names


def build_imputation_design(dataset: SurvivalDataset, target, tve_specs=None, config: ApproxImputationConfig | None = None,
                            current=None, outcome: _Outcome | None = None, drop: bool = False):
    """Design matrix and column names for imputing covariate ``target``.

    ``current`` holds the current completed covariate values (defaults to the
    dataset's stored values). With ``drop`` set, linearly dependent columns are
    removed with a warning.
    """
    config = config or ApproxImputationConfig(m=2)
    specs = _specs_for(dataset, tve_specs if tve_specs is not None else config.tve_specs)
    k = dataset.column(target)
    x = dataset.covariates if current is None else np.asarray(current, dtype=float)
    outcome = outcome or _Outcome(dataset.time, dataset.event.astype(float), nelson_aalen(dataset))
    others = [j for j in range(dataset.p) if j != k]
    other_names = [dataset.names[j] for j in others]
    D = outcome.event
    cols = [np.ones(dataset.n)]
    names = ["intercept"]
    for j, nm in zip(others, other_names):
        cols.append(x[:, j])
        names.append(nm)
    spec = specs[k]
    B = basis_matrix(spec, dataset.time)
    if spec.form == STEP:
        basis_names = [f"D*I{i + 1}" for i in range(spec.dimension)]
    else:
        basis_names = ["D", "D*t"] + [f"D*s{i + 1}" for i in range(spec.dimension - 2)]
    for i in range(spec.dimension):
        cols.append(D * B[:, i])
        names.append(basis_names[i])
    if spec.form == STEP:
        hcols, hnames = _step_hazard_columns(outcome, spec.knots)
        cols += hcols
        names += hnames
        if config.include_interactions:
            for j, nm in zip(others, other_names):
                for c, hn in zip(hcols, hnames):
                    cols.append(x[:, j] * c)
                    names.append(f"{nm}*{hn}")
    else:
        cols.append(outcome.h)
        names.append("H")
        if config.include_h1:
            cols.append(outcome.h1)
            names.append("H1")
        if config.include_interactions:
            for j, nm in zip(others, other_names):
                cols.append(x[:, j] * outcome.h)
                names.append(f"{nm}*H")
                if config.include_h1:
                    cols.append(x[:, j] * outcome.h1)
                    names.append(f"{nm}*H1")
    X = np.column_stack(cols)
    if drop:
        X, names, _ = drop_collinear(X, names)
    return X, names


def _impute_one(dataset, specs, config, outcome, rng, m):
    x = initial_fill(dataset)
    mask = dataset.missing_mask
    targets = incomplete_columns(dataset)
    for it in range(config.fcs_iterations):
        for k in targets:
            X, names = build_imputation_design(dataset, k, specs, config, x, outcome)
            obs = ~mask[:, k]
            miss = mask[:, k]
            Xo, kept_names, keep = drop_collinear(X[obs], names)
            Xm = X[miss][:, keep]
            if dataset.kinds[k] == BINARY:
                coef = posterior_draw_logistic(Xo, x[obs, k], rng, kept_names)
                draw = (rng.random(miss.sum()) < expit(Xm @ coef)).astype(float)
            else:
                coef, sigma2 = posterior_draw_linear(Xo, x[obs, k], rng)
                draw = Xm @ coef + np.sqrt(sigma2) * rng.standard_normal(miss.sum())
            if not np.all(np.isfinite(draw)):
                raise ImputationError(
                    f"non-finite imputed value (imputation {m + 1}, iteration {it + 1}, "
                    f"covariate {dataset.names[k]!r})", imputation=m, iteration=it, covariate=dataset.names[k])
            x[miss, k] = draw
    return x


def impute_approx(dataset: SurvivalDataset, config: ApproxImputationConfig) -> ImputedDatasets:
    """Fully conditional specification with approximately compatible imputation models."""
    specs = _specs_for(dataset, config.tve_specs)
    for k in incomplete_columns(dataset):
        if dataset.missing_mask[:, k].all():
            raise ValueError(f"covariate {dataset.names[k]!r} is never observed")
    outcome = _Outcome(dataset.time, dataset.event.astype(float), nelson_aalen(dataset))
    completed = []
    for m in range(config.m):
        if not dataset.has_missing():
            completed.append(np.array(dataset.covariates))
            continue
        completed.append(_impute_one(dataset, specs, config, outcome, stream(config.rng_seed, m), m))
    return ImputedDatasets(dataset, completed, method="approx", seed=config.rng_seed,
                           diagnostics={"fcs_iterations": config.fcs_iterations})
