import numpy as np
import pytest

from tvemi.data import BINARY, CONTINUOUS, CovariateMeta, SurvivalDataset
from tvemi.sim import apply_missingness, simulate_cohort


def make_dataset(time, event, x, mask=None, kinds=None):
    x = np.asarray(x, dtype=float).reshape(len(time), -1)
    kinds = kinds or [CONTINUOUS] * x.shape[1]
    meta = tuple(CovariateMeta(f"x{k + 1}", kind) for k, kind in enumerate(kinds))
    return SurvivalDataset(np.asarray(time, float), np.asarray(event), x, mask, meta)


@pytest.fixture
def small_cohort():
    """Scenario-2 binary cohort (n=600) with 'standard30' missingness."""
    rng = np.random.default_rng(11)
    full = simulate_cohort(2, BINARY, 600, 0.02, 0.07, 10.0, rng)
    return full, apply_missingness(full, "standard30", np.random.default_rng(12))


@pytest.fixture
def continuous_cohort():
    rng = np.random.default_rng(21)
    full = simulate_cohort(1, CONTINUOUS, 400, 0.02, 0.07, 10.0, rng)
    return full, apply_missingness(full, "standard30", np.random.default_rng(22))
