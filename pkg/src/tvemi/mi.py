"""Shared pieces of the multiple-imputation procedures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BINARY, SurvivalDataset


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; the same key always gives the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, key)]))


def initial_fill(dataset: SurvivalDataset) -> np.ndarray:
    """Missing cells set to the observed mean (continuous) or observed mode (binary)."""
    x = np.array(dataset.covariates, dtype=float)
    mask = dataset.missing_mask
    for k, kind in enumerate(dataset.kinds):
        miss = mask[:, k]
        if not miss.any():
            continue
        obs = x[~miss, k]
        if obs.size == 0:
            raise ValueError(f"covariate {dataset.names[k]!r} has no observed values")
        if kind == BINARY:
            fill = 1.0 if obs.mean() > 0.5 else 0.0
        else:
            fill = obs.mean()
        x[miss, k] = fill
    return x


def incomplete_columns(dataset: SurvivalDataset) -> list[int]:
    return [k for k in range(dataset.p) if dataset.missing_mask[:, k].any()]


@dataclass(eq=False)
class ImputedDatasets:
    """M completed covariate matrices over one shared outcome skeleton."""

    source: SurvivalDataset
    completed: list[np.ndarray]
    method: str = ""
    seed: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for x in self.completed:
            x.setflags(write=False)

    @property
    def m(self) -> int:
        return len(self.completed)

    def dataset(self, i: int) -> SurvivalDataset:
        return self.source.with_covariates(self.completed[i])

    def __iter__(self):
        return (self.dataset(i) for i in range(self.m))

    def long_frame(self):
        """Rows of (imp, id, time, event, covariates...) for long-format export."""
        rows = []
        for i, x in enumerate(self.completed):
            for r in range(self.source.n):
                rows.append((i + 1, self.source.ids[r], float(self.source.time[r]), int(self.source.event[r]),
                             *x[r].tolist()))
        return rows
