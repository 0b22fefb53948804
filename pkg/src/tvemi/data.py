"""Survival data container, risk sets and nonparametric cumulative hazards."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

BINARY = "binary"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class CovariateMeta:
    name: str
    kind: str = CONTINUOUS

    def __post_init__(self):
        if self.kind not in (BINARY, CONTINUOUS):
            raise DataError(f"covariate {self.name!r}: unknown kind {self.kind!r}")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Follow-up times, event indicators and a partially observed covariate matrix.

    Missing cells are tracked by ``missing_mask``; the stored value of a masked
    cell carries no meaning and is zeroed on construction.
    """

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    missing_mask: np.ndarray
    meta: tuple[CovariateMeta, ...]
    ids: tuple = field(default=())

    def __post_init__(self):
        time = _frozen(self.time, float).reshape(-1)
        n = time.shape[0]
        if n == 0:
            raise DataError("dataset has no subjects")
        ev = np.asarray(self.event)
        if not np.all(np.isin(ev, (0, 1))):
            bad = int(np.flatnonzero(~np.isin(ev, (0, 1)))[0])
            raise DataError(f"row {bad}: event must be 0 or 1, got {ev[bad]!r}")
        event = _frozen(ev, np.int8).reshape(-1)
        x = np.array(self.covariates, dtype=float, copy=True)
        if x.ndim == 1:
            x = x.reshape(n, -1)
        mask = np.zeros(x.shape, dtype=bool) if self.missing_mask is None else np.array(self.missing_mask, dtype=bool)
        if x.shape[0] != n or event.shape[0] != n or mask.shape != x.shape:
            raise DataError("time, event, covariates and missing_mask disagree in shape")
        if not np.all(np.isfinite(time)) or np.any(time < 0):
            bad = int(np.flatnonzero(~(np.isfinite(time) & (time >= 0)))[0])
            raise DataError(f"row {bad}: time must be finite and >= 0, got {time[bad]!r}")
        zero_event = (time == 0) & (event == 1)
        if np.any(zero_event):
            raise DataError(f"row {int(np.flatnonzero(zero_event)[0])}: event at time 0")
        meta = tuple(self.meta) if self.meta else tuple(CovariateMeta(f"x{k + 1}") for k in range(x.shape[1]))
        if len(meta) != x.shape[1]:
            raise DataError(f"{len(meta)} covariate descriptors for {x.shape[1]} columns")
        x[mask] = 0.0
        if not np.all(np.isfinite(x)):
            r, c = np.argwhere(~np.isfinite(x))[0]
            raise DataError(f"row {r}, column {meta[c].name!r}: non-finite covariate value")
        for k, m in enumerate(meta):
            if m.kind == BINARY and not np.all(np.isin(x[~mask[:, k], k], (0.0, 1.0))):
                r = int(np.flatnonzero(~mask[:, k] & ~np.isin(x[:, k], (0.0, 1.0)))[0])
                raise DataError(f"row {r}, column {m.name!r}: binary covariate must be 0 or 1")
        x.setflags(write=False)
        mask.setflags(write=False)
        ids = tuple(self.ids) if len(self.ids) else tuple(range(n))
        if len(ids) != n:
            raise DataError("ids length does not match number of subjects")
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "meta", meta)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.meta]

    @property
    def kinds(self) -> list[str]:
        return [m.kind for m in self.meta]

    def column(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            return int(name_or_index)
        try:
            return self.names.index(name_or_index)
        except ValueError:
            raise KeyError(f"no covariate named {name_or_index!r}") from None

    def has_missing(self) -> bool:
        return bool(self.missing_mask.any())

    def complete_rows(self) -> np.ndarray:
        return ~self.missing_mask.any(axis=1)

    def with_covariates(self, covariates, missing_mask=None) -> "SurvivalDataset":
        """Same outcome skeleton with a different covariate matrix."""
        if missing_mask is None:
            missing_mask = np.zeros(np.shape(covariates), dtype=bool)
        return SurvivalDataset(self.time, self.event, covariates, missing_mask, self.meta, self.ids)

    def subset(self, rows) -> "SurvivalDataset":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return SurvivalDataset(
            self.time[rows], self.event[rows], self.covariates[rows], self.missing_mask[rows],
            self.meta, tuple(self.ids[i] for i in rows),
        )

    def event_times(self) -> np.ndarray:
        """Observed event times (with repeats), i.e. times of subjects with event = 1."""
        return self.time[self.event == 1]


def failure_times(time, event):
    """Unique failure times and the number of events at each."""
    t = np.asarray(time, dtype=float)[np.asarray(event) == 1]
    return np.unique(t, return_counts=True)


def risk_set_counts(dataset: SurvivalDataset, t: float) -> tuple[int, int]:
    """Number at risk (time >= t) and number of events exactly at t."""
    if t < 0:
        raise ValueError("t must be >= 0")
    at_risk = int(np.count_nonzero(dataset.time >= t))
    events = int(np.count_nonzero((dataset.time == t) & (dataset.event == 1)))
    return at_risk, events


def _at_risk(time, times_sorted):
    # number with time >= each query time
    s = np.sort(np.asarray(time, dtype=float))
    return s.size - np.searchsorted(s, times_sorted, side="left")


def _prefix_eval(event_times, increments, t):
    cum = np.concatenate(([0.0], np.cumsum(increments)))
    idx = np.searchsorted(event_times, np.asarray(t, dtype=float), side="right")
    return cum[idx]


@dataclass(frozen=True, eq=False)
class CumulativeHazardEstimate:
    """Nelson-Aalen estimate H(t) and its time-weighted companion H1(t).

    Both are right-continuous step functions with jumps at the failure times;
    the H1 jump at t is ``t`` times the H jump.
    """

    event_times: np.ndarray
    h_increments: np.ndarray
    h1_increments: np.ndarray

    def h(self, t):
        return _prefix_eval(self.event_times, self.h_increments, t)

    def h1(self, t):
        return _prefix_eval(self.event_times, self.h1_increments, t)

    def h_interval(self, t, lower, upper):
        """Sum of H increments over ``lower < s <= min(t, upper)``."""
        t = np.asarray(t, dtype=float)
        hi = np.minimum(t, upper)
        return np.where(hi > lower, self.h(hi) - self.h(lower), 0.0)


def nelson_aalen(dataset_or_time, event=None) -> CumulativeHazardEstimate:
    """Nelson-Aalen cumulative hazard with tied events grouped at each failure time."""
    if event is None:
        time, event = dataset_or_time.time, dataset_or_time.event
    else:
        time = dataset_or_time
    times, d = failure_times(time, event)
    n = _at_risk(time, times)
    inc = d / n
    return CumulativeHazardEstimate(_frozen(times, float), _frozen(inc, float), _frozen(times * inc, float))


@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """Breslow baseline cumulative hazard: jumps at the unique failure times."""

    event_times: np.ndarray
    increments: np.ndarray

    def cumulative(self, t):
        return _prefix_eval(self.event_times, self.increments, t)

    def increment_at(self, t):
        """Jump at ``t``, falling back to the nearest failure time <= t.

        Returns the increment and a flag that is True when ``t`` was not itself
        a failure time.
        """
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t, side="right") - 1
        exact = (idx >= 0) & (self.event_times[np.clip(idx, 0, None)] == t)
        inc = np.where(idx >= 0, self.increments[np.clip(idx, 0, None)], 0.0)
        return inc, ~exact


def linear_predictor_at(specs: Sequence, coefficients, x, times) -> np.ndarray:
    """Log relative hazard of each row of ``x`` at each of ``times``.

    Returns an array of shape (len(times), len(x)).
    """
    from .basis import tve_matrix

    f = tve_matrix(specs, coefficients, times)  # (n_times, p)
    return f @ np.asarray(x, dtype=float).T


def breslow_baseline(dataset: SurvivalDataset, model, completed_covariates) -> BaselineHazard:
    """Breslow increments d_j / sum_{risk set} exp(lp_i(t_j)) under ``model``.

    ``model`` needs ``specs`` and ``coefficients``; the linear predictor is
    evaluated at each failure time so time-varying effects enter the risk sums.
    """
    x = np.asarray(completed_covariates, dtype=float)
    if x.shape != dataset.covariates.shape or not np.all(np.isfinite(x)):
        raise ValueError("completed covariates must match the dataset shape and be finite")
    beta = np.asarray(model.coefficients, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("model coefficients must be finite")
    times, d = failure_times(dataset.time, dataset.event)
    order = np.argsort(dataset.time, kind="stable")
    t_sorted = dataset.time[order]
    xs = x[order]
    start = np.searchsorted(t_sorted, times, side="left")
    inc = np.empty(times.size)
    for j0 in range(0, times.size, 256):
        j1 = min(j0 + 256, times.size)
        lp = linear_predictor_at(model.specs, beta, xs, times[j0:j1])
        cols = np.arange(xs.shape[0])
        risk = cols[None, :] >= start[j0:j1, None]
        s0 = np.where(risk, np.exp(lp), 0.0).sum(axis=1)
        if np.any(s0 <= 0) or not np.all(np.isfinite(s0)):
            raise FloatingPointError("empty or non-finite risk set sum at a failure time")
        inc[j0:j1] = d[j0:j1] / s0
    return BaselineHazard(_frozen(times, float), _frozen(inc, float))
