"""Functional forms for time-varying log hazard ratios.

A covariate's effect at time ``t`` is ``basis(spec, t) @ coeffs``. Supported
forms are constant, linear in time, restricted cubic spline (3-5 knots) and a
step function over consecutive intervals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

CONSTANT = "constant"
LINEAR = "linear"
RCS = "rcs"
STEP = "step"

KNOT_PERCENTILES = {
    3: (10.0, 50.0, 90.0),
    4: (5.0, 35.0, 65.0, 95.0),
    5: (5.0, 25.0, 50.0, 75.0, 95.0),
}


class KnotError(ValueError):
    """Knot placement failed because the event times have too little spread."""


@dataclass(frozen=True)
class TveSpec:
    form: str = CONSTANT
    knots: tuple[float, ...] = ()

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if self.form in (CONSTANT, LINEAR):
            if knots:
                raise ValueError(f"{self.form} form takes no knots")
        elif self.form == RCS:
            if len(knots) < 3:
                raise ValueError("restricted cubic spline needs at least 3 knots")
        elif self.form == STEP:
            if len(knots) < 1:
                raise ValueError("step function needs at least one cutpoint")
            if knots[0] <= 0:
                raise ValueError("step cutpoints must be positive")
        else:
            raise ValueError(f"unknown TVE form {self.form!r}")
        if np.any(np.diff(knots) <= 0) or not np.all(np.isfinite(knots)):
            raise ValueError(f"knots must be finite and strictly increasing: {knots}")

    @property
    def dimension(self) -> int:
        if self.form == CONSTANT:
            return 1
        if self.form == LINEAR:
            return 2
        return len(self.knots)

    @property
    def label(self) -> str:
        if self.form == RCS:
            return f"rcs{len(self.knots)}"
        return self.form

    def coef_names(self, covariate: str) -> list[str]:
        if self.form == CONSTANT:
            return [covariate]
        if self.form == LINEAR:
            return [covariate, f"{covariate}:t"]
        if self.form == RCS:
            return [covariate, f"{covariate}:t"] + [f"{covariate}:s{i + 1}" for i in range(len(self.knots) - 2)]
        return [f"{covariate}:I{i + 1}" for i in range(len(self.knots))]

    def to_string(self) -> str:
        if not self.knots:
            return self.form
        return f"{self.form}:" + ",".join(repr(k) for k in self.knots)

    @classmethod
    def from_string(cls, text: str) -> "TveSpec":
        text = text.strip()
        form, _, rest = text.partition(":")
        knots = tuple(float(v) for v in rest.split(",") if v.strip()) if rest else ()
        return cls(form.strip().lower(), knots)

    @classmethod
    def constant(cls) -> "TveSpec":
        return cls(CONSTANT)

    @classmethod
    def linear(cls) -> "TveSpec":
        return cls(LINEAR)

    @classmethod
    def rcs(cls, knots) -> "TveSpec":
        return cls(RCS, tuple(knots))

    @classmethod
    def step(cls, cutpoints) -> "TveSpec":
        return cls(STEP, tuple(cutpoints))


def _rcs_terms(knots, t):
    u = np.asarray(knots)
    t = np.asarray(t, dtype=float)[..., None]
    L = u.size
    scale = u[L - 1] - u[L - 2]
    inner = u[: L - 2]
    return (
        np.clip(t - inner, 0, None) ** 3
        - np.clip(t - u[L - 2], 0, None) ** 3 * (u[L - 1] - inner) / scale
        + np.clip(t - u[L - 1], 0, None) ** 3 * (u[L - 2] - inner) / scale
    )


def basis_matrix(spec: TveSpec, t) -> np.ndarray:
    """Basis rows for each time in ``t``; shape (len(t), spec.dimension)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if not np.all(np.isfinite(t)):
        raise ValueError("basis evaluated at a non-finite time")
    if spec.form == CONSTANT:
        return np.ones((t.size, 1))
    if spec.form == LINEAR:
        return np.column_stack([np.ones(t.size), t])
    if spec.form == RCS:
        return np.column_stack([np.ones(t.size), t, _rcs_terms(spec.knots, t)])
    cuts = np.asarray(spec.knots)
    idx = np.minimum(np.searchsorted(cuts, t, side="left"), cuts.size - 1)
    out = np.zeros((t.size, cuts.size))
    out[np.arange(t.size), idx] = 1.0
    return out


def basis(spec: TveSpec, t: float) -> np.ndarray:
    return basis_matrix(spec, [t])[0]


def tve_eval(spec: TveSpec, coeffs, t):
    """Log hazard ratio ``basis(spec, t) @ coeffs``; scalar in, scalar out."""
    coeffs = np.asarray(coeffs, dtype=float).reshape(-1)
    if coeffs.size != spec.dimension:
        raise ValueError(f"{spec.label} needs {spec.dimension} coefficients, got {coeffs.size}")
    out = basis_matrix(spec, t) @ coeffs
    return float(out[0]) if np.ndim(t) == 0 else out


def block_slices(specs: Sequence[TveSpec]) -> list[slice]:
    out, start = [], 0
    for s in specs:
        out.append(slice(start, start + s.dimension))
        start += s.dimension
    return out


def total_dimension(specs: Sequence[TveSpec]) -> int:
    return sum(s.dimension for s in specs)


def tve_matrix(specs: Sequence[TveSpec], coefficients, times) -> np.ndarray:
    """Values f_k(t) of every covariate's effect; shape (len(times), len(specs))."""
    beta = np.asarray(coefficients, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.column_stack(
        [basis_matrix(s, times) @ beta[sl] for s, sl in zip(specs, block_slices(specs))]
    ) if specs else np.zeros((times.size, 0))


def ph_contrast(spec: TveSpec) -> np.ndarray:
    """Rows spanning the 'no time variation' hypothesis for one block.

    Linear and spline forms test every coefficient but the intercept; a step
    function tests equality of all interval effects (differences from the
    first interval).
    """
    q = spec.dimension
    if spec.form == CONSTANT:
        return np.zeros((0, 1))
    if spec.form == STEP:
        c = np.zeros((q - 1, q))
        c[:, 0] = -1.0
        c[np.arange(q - 1), np.arange(1, q)] = 1.0
        return c
    return np.eye(q)[1:]


def select_knots(event_times, n_knots: int = 5, percentiles=None) -> tuple[float, ...]:
    """Knots at fixed percentiles of the observed event times.

    Percentiles use linear interpolation between order statistics.
    """
    if percentiles is None:
        if n_knots not in KNOT_PERCENTILES:
            raise ValueError(f"no default percentiles for {n_knots} knots")
        percentiles = KNOT_PERCENTILES[n_knots]
    t = np.asarray(event_times, dtype=float)
    if np.unique(t).size < len(percentiles):
        raise KnotError(f"need at least {len(percentiles)} distinct event times, got {np.unique(t).size}")
    knots = np.percentile(t, percentiles)
    if np.any(np.diff(knots) <= 0):
        raise KnotError(f"knots collide: {knots.tolist()}")
    return tuple(float(k) for k in knots)


def parse_tve_flag(text: str, event_times=None) -> TveSpec:
    """Turn a command-line form name into a spec.

    ``rcs3``/``rcs4``/``rcs5`` need ``event_times`` for knot placement;
    ``step:1,2,5`` and ``rcs:0.5,2,6`` carry explicit positions.
    """
    text = text.strip().lower()
    if text in (CONSTANT, LINEAR):
        return TveSpec(text)
    if text.startswith(RCS) and text[3:].isdigit():
        if event_times is None:
            raise ValueError(f"{text} needs event times to place knots")
        return TveSpec.rcs(select_knots(event_times, int(text[3:])))
    return TveSpec.from_string(text)
